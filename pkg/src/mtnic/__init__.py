"""Multitask neural image compression at desk scale.

Subpackages and modules:

- ``autodiff``: reverse-mode differentiation over float64 tensors, NICP checkpoints
- ``models``: patch encoder, task heads, image-level CNN
- ``training``: Adam, plateau schedule, augmentation, training loops
- ``compression``: streamed patch-grid compression and the NICW format
- ``survival``: Cox partial likelihood, Kaplan-Meier, log-rank
- ``metrics``: Spearman and CI, AUC, folds, ensembling, task-inclusion analysis
- ``synthdata``: deterministic synthetic patches, mini-WSIs and cohorts
- ``pipeline`` / ``cli``: end-to-end drivers and the ``mtnic`` command
"""

__version__ = "0.1.0"
