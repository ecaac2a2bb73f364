"""metaseg: few-shot K-way semantic segmentation on a desk-scale CPU budget.

A two-branch convolutional embedding feeds per-pixel features into a
closed-form ridge-regression classifier that is re-solved inside every
episode; the embedding (and the head's scalars) are meta-trained end to end
through that solve. Everything runs on a small from-scratch autodiff engine.
"""

__version__ = "0.1.0"
