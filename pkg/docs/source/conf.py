# Copyright (c) qlonn Development Team.
# Distributed under the terms of the Modified BSD License.

# Configuration file for the Sphinx documentation builder.
#
# For the full list of built-in configuration values, see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

import time
from pathlib import Path

HERE = Path(__file__).parent.resolve()

# -- Project information -----------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#project-information

project = "qlonn"
copyright = f"2026-{time.localtime().tm_year}, qlonn Development Team"  # noqa
author = "qlonn Development Team"
_version = {}
exec((HERE.parent.parent / "projects/qlonn/qlonn/_version.py").read_text(), _version)
release = _version["__version__"]

# -- General configuration ---------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#general-configuration

extensions = ["myst_parser", "sphinx.ext.autodoc"]

templates_path = ["_templates"]
source_suffix = {
    ".rst": "restructuredtext",
    ".md": "markdown",
}

# -- Options for HTML output -------------------------------------------------
# https://www.sphinx-doc.org/en/master/usage/configuration.html#options-for-html-output

html_theme = "pydata_sphinx_theme"
html_theme_options = {
    "logo": {
        "text": "qlonn",
        "alt_text": "Quantum-limited optical neural networks",
    },
    "use_edit_page_button": False,
    "show_toc_level": 1,
    "navbar_align": "left",
    "footer_items": ["copyright.html"],
}

myst_heading_anchors = 3
