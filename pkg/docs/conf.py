import os

READ_THE_DOCS = os.environ.get('READTHEDOCS', None) == 'True'

needs_sphinx = '1.5'

extensions = ['sphinx.ext.autodoc',
              'sphinx.ext.intersphinx', 'sphinx.ext.ifconfig']
intersphinx_mapping = {
    'python': ('https://docs.python.org/3', None),
    'torch': ('https://pytorch.org/docs/stable', None),
}

templates_path = ['_templates']
exclude_patterns = ['_build']
source_suffix = '.rst'
master_doc = 'index'

# torch is heavy and not needed to render docstrings
autodoc_mock_imports = ['torch', 'numpy', 'rich']

project = u'resmat'

# The short X.Y version.
version = '0.1.0'

# The full version, including alpha/beta/rc tags.
release = version

html_title = "%(project)s v%(release)s docs - residual matrix transformers" % {
    'project': project, 'release': release}
html_short_title = "Home"

html_show_sourcelink = True

htmlhelp_basename = 'resmatdoc'

html_sidebars = {
    '**': [
        'about.html',
        'navigation.html',
        'relations.html',
        'searchbox.html',
    ],
}

html_theme_options = {
    'description': "Residual matrix transformers for Python 3 using PyTorch",
    'sidebar_collapse': False,
    'show_related': True,
    'fixed_sidebar': True,
    'page_width': '960px',
}
