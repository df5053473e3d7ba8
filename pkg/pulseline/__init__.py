"""Contactless pulse-rate estimation from masked facial video."""

import logging

logging.getLogger(__name__).addHandler(logging.NullHandler())
