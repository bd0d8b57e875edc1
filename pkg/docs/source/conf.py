# -*- coding: utf-8 -*-
#
# Configuration file for the Sphinx documentation builder.
# http://www.sphinx-doc.org/en/master/config

import os
from pathlib import Path
import sys

sys.path.insert(0, os.path.abspath("../.."))


# -- Project information -----------------------------------------------------

project = "aeml"
copyright = "2024, aeml developers"
author = "aeml developers"

version = Path(__file__).parents[2].joinpath("aeml/VERSION").read_text().strip()
release = version


# -- General configuration ---------------------------------------------------

extensions = [
    "sphinx.ext.autodoc",
    "sphinx.ext.mathjax",
    "sphinx.ext.viewcode",
    "sphinx_click.ext",
    "sphinx_markdown_builder",
]

templates_path = ["_templates"]
source_suffix = ".rst"
master_doc = "index"
language = "en"
exclude_patterns = []
pygments_style = None
autodoc_member_order = "bysource"


# -- Options for HTML output -------------------------------------------------

html_theme = "alabaster"
html_static_path = ["_static"]
htmlhelp_basename = "aemldoc"


# -- Options for manual page output ------------------------------------------

man_pages = [(master_doc, "aeml", "aeml Documentation", [author], 1)]
