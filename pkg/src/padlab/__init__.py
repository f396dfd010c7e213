"""Traffic-analysis-defense laboratory.

Trainable padding policies for page-load and flow traffic: an LSTM padding
generator trained adversarially against fingerprinting and flow-matching
discriminators, packet-level padding realization, attack-based evaluation,
and a compact weights format consumable by a live proxy.
"""

__version__ = "0.1.0"
