"""Damage-aware reward terms, pure functions of per-step readouts.

All three impact terms are penalties (>= 0) and the total reward is their
negated weighted sum minus the motion-regulation penalty, so maximizing
reward means minimizing damage. Weighted per-term normalization scales keep
each term O(1) on a typical unprotected fall; the raw (unnormalized) values
are reported in the breakdown for logging.

The readout argument only needs the per-link aggregated contact forces and
per-joint load arrays, so both single-substep readouts and control-step
peak aggregates work.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import RewardConfig
from .physics import ModelArrays


@dataclass
class RewardBreakdown:
    contact: float  # raw penalty values
    joint: float
    torque: float
    regulation: float
    total: float


def effective_weights(cfg: RewardConfig) -> tuple[float, float, float]:
    """Term weights with normalization folded in."""
    return (
        cfg.w_contact / cfg.contact_norm,
        cfg.w_joint / cfg.joint_norm,
        cfg.w_torque / cfg.torque_norm,
    )


def contact_penalty(link_force: np.ndarray, link_contact: np.ndarray,
                    arrays: ModelArrays, cfg: RewardConfig,
                    gravity: float = 9.81) -> float:
    """Sensitivity-weighted contact load: mean over active contacts plus
    alpha times the peak. Gravitational loading m_i g is subtracted so only
    the dynamic part of the force counts; zero when nothing touches."""
    active = np.asarray(link_contact, dtype=bool)
    n = int(active.sum())
    if n == 0:
        return 0.0
    scores = np.zeros(arrays.n_links)
    dynamic = link_force - arrays.mass * gravity
    scores[active] = arrays.sens_weight[active] * np.maximum(
        dynamic[active], 0.0
    )
    return float(scores[active].mean() + cfg.alpha * scores.max())


def joint_penalty(joint_reaction: np.ndarray, arrays: ModelArrays,
                  cfg: RewardConfig | None = None) -> float:
    """Reaction-force exceedance over each joint's load threshold.

    The positive-part gate keeps sub-threshold joints penalty-free; the raw
    signed-distance variant (no gate) is available for ablation via
    cfg.raw_joint_gate.
    """
    excess = np.asarray(joint_reaction, dtype=np.float64) - arrays.reaction_threshold
    if cfg is not None and cfg.raw_joint_gate:
        return float(np.abs(excess).sum())
    return float(np.maximum(excess, 0.0).sum())


def torque_penalty(joint_external_torque: np.ndarray,
                   arrays: ModelArrays) -> float:
    """Squared positive part of |external torque| / rated - 1 per joint."""
    ratio = np.abs(np.asarray(joint_external_torque, dtype=np.float64))
    ratio = ratio / arrays.torque_rated
    over = np.maximum(ratio - 1.0, 0.0)
    return float((over * over).sum())


def regulation_penalty(q: np.ndarray, qd: np.ndarray, prev_qd: np.ndarray,
                       action: np.ndarray, prev_action: np.ndarray,
                       arrays: ModelArrays, cfg: RewardConfig,
                       dt_control: float) -> float:
    """Motion-quality penalty: joint-limit proximity, velocity,
    acceleration, and action rate."""
    margin = cfg.limit_margin
    hi = np.maximum(q - (arrays.limit_hi - margin), 0.0) / margin
    lo = np.maximum((arrays.limit_lo + margin) - q, 0.0) / margin
    limit_term = float((hi * hi + lo * lo).sum())
    qacc = (qd - prev_qd) / dt_control
    return (
        cfg.w_qpos * limit_term
        + cfg.w_qvel * float(qd @ qd)
        + cfg.w_qacc * float(qacc @ qacc)
        + cfg.w_arate * float((action - prev_action) @ (action - prev_action))
    )


def total_reward_raw(link_force, link_contact, joint_reaction,
                     joint_external_torque, state, prev_qd, action,
                     prev_action, arrays: ModelArrays, cfg: RewardConfig,
                     dt_control: float, gravity: float = 9.81
                     ) -> RewardBreakdown:
    """Array-argument variant of total_reward for hot loops."""
    c = contact_penalty(link_force, link_contact, arrays, cfg, gravity)
    j = joint_penalty(joint_reaction, arrays, cfg)
    e = torque_penalty(joint_external_torque, arrays)
    reg = regulation_penalty(state.q, state.qd, prev_qd, action, prev_action,
                             arrays, cfg, dt_control)
    wc, wj, we = effective_weights(cfg)
    total = -(wc * c + wj * j + we * e) - reg
    return RewardBreakdown(contact=c, joint=j, torque=e, regulation=reg,
                           total=total)


def total_reward(readout, state, prev_qd, action, prev_action,
                 arrays: ModelArrays, cfg: RewardConfig,
                 dt_control: float, gravity: float = 9.81) -> RewardBreakdown:
    """Compose the damage and regulation penalties into the step reward."""
    return total_reward_raw(
        readout.link_force, readout.link_contact, readout.joint_reaction,
        readout.joint_external_torque, state, prev_qd, action, prev_action,
        arrays, cfg, dt_control, gravity,
    )
