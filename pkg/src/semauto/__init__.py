"""Verbalize entity-relation triple sets with a parser-checked generation loop.

The package pairs a trainable encoder-decoder that renders a triple set as
text with a frozen encoder-decoder that parses text back into triples. Text
candidates are scored by exact-match triple F1 against the input message;
generation strategies include greedy decoding, temperature/nucleus sampling
with best-of-n selection, and inference-time gradient updates to the
generator through a straight-through estimator.
"""

__version__ = "0.1.0"
