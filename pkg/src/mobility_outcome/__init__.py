"""Smartphone mobility features for predicting depression treatment outcome.

Pipeline: ingest raw location/WiFi/questionnaire data, fuse sensing into a
minute-level track, cut it into weekly questionnaire intervals, extract
mobility features, align the two phone platforms, and classify improvement
with an RBF SVM under leave-one-user-out validation.
"""

__version__ = "0.1.0"
