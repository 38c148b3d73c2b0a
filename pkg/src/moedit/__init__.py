"""Lifelong editing of a small vision-language transformer.

Edits are compiled into low-rank experts by a trained generator, stored
in an append-only repository, and routed back into the frozen model by
learned visual/textual similarity at one intercepted layer.
"""

__version__ = "0.1.0"
