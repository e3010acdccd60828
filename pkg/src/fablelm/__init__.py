"""Desk-scale pipeline for compact fable language models.

Covers the full loop: corpus loading, subword tokenizer training (BPE and
Unigram), sequence packing, decoder-only transformer pretraining, structured
pruning, knowledge distillation, post-training quantization, a multi-metric
evaluation suite, an LLM-judge client, and a combinatorial story generator.
"""

__version__ = "0.1.0"
