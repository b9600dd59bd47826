"""Desk-scale lab for co-trained reprogramming distillation.

A frozen teacher network and a lightweight student are partitioned into the
same number of coarse stages. Trainable projectors map each teacher stage
feature into the paired student stage's geometry; projected features are
injected into the remaining student blocks to produce hybrid logits, and the
student is trained with a weighted sum of supervised, hybrid-supervised,
logit-KL, and batch-CKA feature alignment losses. Diagnostics, ablation
suites, and a CLI round out the lab.
"""

__version__ = "0.1.0"
