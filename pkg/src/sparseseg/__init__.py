"""Real-time sparse instance segmentation toolkit.

Numpy-backed model, Hungarian-matching training loss, mask-AP evaluation,
synthetic polygonal-terrain data generation, and an FPS benchmark harness,
wired together behind the ``sparseseg`` command line tool.
"""

__version__ = "0.1.0"
