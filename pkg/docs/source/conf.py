# Configuration file for the Sphinx documentation builder.
#
# For a full list of options see the documentation:
# https://www.sphinx-doc.org/en/master/usage/configuration.html

# -- Path setup --------------------------------------------------------------

import os
import sys
from importlib.metadata import version as _version
sys.path.insert(0, os.path.abspath('../../kvpool'))


# -- Project information -----------------------------------------------------

project = 'kvpool-sim'
copyright = '2026, the kvpool developers'
author = 'the kvpool developers'

# The full version, including alpha/beta/rc tags
version = _version('kvpool-sim')


# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.mathjax',
    'sphinx.ext.napoleon',
    'myst_parser',
]

myst_enable_extensions = [
    "colon_fence",
    "deflist",
    "dollarmath",
    "linkify",
    "smartquotes",
]

myst_heading_anchors = 2

# Include the __init__ docstring with the autoclass
autoclass_content = 'both'

# Napolean Settings
napoleon_google_docstring = False

templates_path = ['_templates']

exclude_patterns = []


# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
