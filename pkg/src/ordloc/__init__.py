"""Query-object localization: a box-moving policy rewarded by distance in an ordinal embedding."""

__version__ = "0.1.0"
