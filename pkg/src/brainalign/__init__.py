"""Self-supervised text-vision alignment for brain MRI abnormality detection.

Two-stage training: a domain language model over radiology reports (masked
token prediction, then Siamese section matching), and per-sequence 3D
convolutional encoders regressed onto the frozen report embeddings. Frozen
encoders support zero-shot scoring against free-text queries, examination
ensembles, visual-semantic retrieval, guided-backprop saliency, and report
discrepancy checks.
"""

__version__ = "0.1.0"
