"""
Desk-scale training harness: byte corpora, loss and optimizer, checkpoints,
metrics, gradient checks and the training/evaluation/sweep loops.
"""
