"""Sequential multi-step retrieval recommender for C2C marketplaces.

Subpackages and modules: ``datamodel`` (event schema), ``synthgen``
(synthetic corpora), ``preprocess`` (windows and vocab), ``nn`` (tensor core),
``model`` / ``training`` (three-tower recommender), ``index`` (exact top-K),
``evaluation`` (offline metrics), ``serve`` (store and HTTP service) and
``pipeline`` / ``cli`` (end-to-end wiring).
"""
__version__ = "0.1.0"
