"""Adversarial batch normalization at desk scale.

Modules:

- ``tensor``: numpy arrays with a reverse-mode tape
- ``layers``: batch norm with main/aux branches
- ``attack``: PGD on per-channel feature statistics
- ``models``: small residual networks and split points
- ``data``: procedural shapes, domain shifts, mCE
- ``train``: pretraining, AdvBN fine-tuning, evaluation, checkpoints, timing
- ``analysis``: per-layer feature divergence
- ``viz``: decoder and perturbed-image rendering
- ``cli``: the ``advbn`` command
"""

__version__ = "0.1.0"
