"""Faster-than-demonstration execution layer for action-chunk robot policies.

Subsystems: shared chunk/trajectory types (:mod:`chunkdrive.core`), a
simulated first-order-lag plant with delayed sensors
(:mod:`chunkdrive.plant_sim`), sway-based delay calibration
(:mod:`chunkdrive.calibration`), duration retiming
(:mod:`chunkdrive.temporal_opt`), client-side MPC tracking
(:mod:`chunkdrive.spatial_opt`), learned speed adaptation
(:mod:`chunkdrive.speed_adapt`), the client/server rollout pipeline
(:mod:`chunkdrive.pipeline`), offline analysis (:mod:`chunkdrive.analysis`),
and the ``chunkdrive`` CLI (:mod:`chunkdrive.cli`).
"""

__version__ = "0.1.0"
