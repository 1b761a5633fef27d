"""Desk-scale speech summarization with encoder/decoder transplant transfer.

Everything numerical is built on the in-package reverse-mode autodiff
(`speechsum.autodiff`); numpy supplies array arithmetic only.
"""

__version__ = "0.1.0"
