"""Prediction-powered inference for multinomial logistic regression.

Fits cause-of-death regression coefficients from a small labeled subset plus
a large set of machine-predicted labels, rectifies the bias of naive
inference, and reports valid confidence intervals.
"""

__version__ = "0.1.0"
