"""Desk-scale knowledge-distillation pretraining lab.

Byte-level corpora, a small Llama-style decoder with hand-written backprop,
the mixed LM+KD objective, AdamW training, perplexity / multiple-choice
evaluation, per-token mechanism analyses and a resumable sweep runner.
"""

__version__ = "0.1.0"
