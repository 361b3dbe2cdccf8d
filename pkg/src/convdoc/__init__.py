"""Hierarchical convolutional document model.

A two-level ConvNet that composes word embeddings into sentence embeddings
and sentence embeddings into a document embedding, trained end-to-end for
classification with hand-written backpropagation.  The same trained model
produces gradient-based saliency maps and extractive summaries, and a
TF-IDF Naive Bayes harness scores the summaries.
"""

__version__ = "0.1.0"
