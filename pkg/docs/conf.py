"""Sphinx configuration for the lipfast documentation."""

import glob
import os
import shutil
import sys

from recommonmark.parser import CommonMarkParser

on_rtd = os.environ.get("READTHEDOCS", None) == "True"

project_root = os.path.join(os.path.dirname(os.getcwd()), "src")
sys.path.insert(0, project_root)

import lipfast  # noqa

needs_sphinx = "1.5"
extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.viewcode",
    "sphinx.ext.napoleon",
]
napoleon_google_docstring = True
napoleon_include_init_with_doc = True
napoleon_numpy_docstring = False

master_doc = "index"
project = "lipfast"
copyright = ", lipfast developers"
version = lipfast.__version__
release = lipfast.__version__

exclude_patterns = ["_build"]
pygments_style = "sphinx"

# readthedocs supplies its own theme
if not on_rtd:
    import sphinx_rtd_theme

    html_theme = "sphinx_rtd_theme"
    html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]

htmlhelp_basename = "lipfastdoc"

source_parsers = {".md": CommonMarkParser}
source_suffix = [".rst", ".md"]


def setup(app):
    """Copy the top-level markdown files into docs/md for the toctree."""
    curdir = os.path.dirname(os.path.abspath(__file__))
    mddir = os.path.join(curdir, "md")
    if not os.path.isdir(mddir):
        os.mkdir(mddir)
    for old_mdfile in glob.glob(os.path.join(mddir, "*.md")):
        os.remove(old_mdfile)
    for new_mdfile in glob.glob(os.path.join(curdir, "../*.md")):
        shutil.copy(new_mdfile, mddir)
