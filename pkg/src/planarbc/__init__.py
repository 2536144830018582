"""Behavioral cloning for a simulated planar arm.

Subpackages cover the whole pipeline: ``sim`` (arm + contact dynamics),
``render`` (top-down observation images), ``nn`` (small reverse-mode autodiff
stack), ``policy`` (visuomotor network, loss, training loop), ``data``
(demonstration recording and on-disk episode format), ``evaluate`` (rollouts
and experiment protocols), ``estimator`` (sklearn-style wrapper around
training), ``teleop`` (websocket teleoperation service), ``cli``.
"""

__version__ = "0.1.0"
