"""Tripartite-graph recommender for live-stream commerce.

Subpackages: graph storage, synthetic data generation, streamer-influence
analysis, a small numeric kernel with manual backprop, mini-batch sampling,
the multi-encoder model, training, full-ranking evaluation, and a CLI.
"""

__version__ = "0.1.0"
