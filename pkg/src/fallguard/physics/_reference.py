"""Pure-numpy physics kernel: the import-time fallback for the compiled
extension and the readable reference for what the extension computes.

One substep of the algorithm (position-first symplectic Euler):

1. integrate the generalized positions (base pose + joint angles) with the
   current velocities; link poses are rebuilt by forward kinematics, so
   joint anchors coincide exactly and no positional drift can accumulate;
2. build maximal link velocities at the PRE-step configuration: evaluating
   the pin constraints at the post-step configuration against these
   velocities is what recreates the centripetal/Coriolis coupling that a
   persistent-velocity impulse solver gets for free;
3. explicit forces at the new configuration: gravity, ground/obstacle
   penalty contacts, the spring part of PD actuation (clamped to rated
   torque x peak factor), and joint-limit stop springs;
4. unconstrained velocity update, then one SPD solve for the pin-joint
   constraint impulses TOGETHER with implicit joint-damping impulses:
   damping (PD kd and limit-stop damping) acts on the post-step joint
   rate, which keeps heavily damped light links stable where explicit
   damping would blow up at dt = 1/200;
5. extraction of generalized velocities (base twist + relative joint
   rates) and a hard clamp on joint rates.

Contact damping and the viscous friction slope are capped per contact by
the effective mass felt at the contact point so that no penalty force can
exceed the explicit stability bound.

Joint reaction force = constraint impulse magnitude / dt.  External joint
torque = moment about the joint pivot of all contact forces and constraint
reactions acting on the child link plus the joint's own limit-stop torque;
motor output (spring + implicit damping) is excluded by construction.
"""

from __future__ import annotations

import numpy as np


def _rot(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array(((c, s), (-s, c)))


def _cross(r, f) -> float:
    # torque about +y for the clockwise-positive angle convention
    return r[1] * f[0] - r[0] * f[1]


def forward_kinematics_arrays(m, base, base_vel, q, qd):
    """Link world poses/velocities from the generalized state."""
    L, J = m.n_links, m.n_joints
    th = np.empty(L)
    pos = np.empty((L, 2))
    vel = np.empty((L, 2))
    om = np.empty(L)
    th[0] = base[2]
    pos[0] = base[:2]
    vel[0] = base_vel[:2]
    om[0] = base_vel[2]
    for j in range(J):
        p, c = m.jparent[j], m.jchild[j]
        th[c] = th[p] + q[j]
        rp = _rot(th[p]) @ m.anchor_p[j]
        rc = _rot(th[c]) @ m.anchor_c[j]
        pos[c] = pos[p] + rp - rc
        om[c] = om[p] + qd[j]
        vel[c] = (
            vel[p]
            + om[p] * np.array((rp[1], -rp[0]))
            - om[c] * np.array((rc[1], -rc[0]))
        )
    return th, pos, vel, om


def _detect_contacts(m, th, pos, vel, om, world, geometry_full, dt):
    """Penalty contact forces against the ground plane and the optional
    rectangular step. Returns per-contact tuples (link, force, normal, pt)."""
    (mu, restitution, k_n, c_n, k_t) = (
        world["friction"], world["restitution"], world["k_normal"],
        world["c_normal"], world["k_tangent"],
    )
    c_n_base = c_n * (1.0 - restitution)
    obstacle = world["obstacle"]
    contacts = []
    for i in range(m.n_links):
        n_cand = m.cand_count[i] if geometry_full else 1
        R = _rot(th[i])
        for k in range(n_cand):
            local = m.cand_local[i, k] if geometry_full else np.zeros(2)
            center = pos[i] + R @ local
            r = m.radius[i]
            hits = []
            pen_plane = r - center[1]
            if pen_plane > 0.0:
                hits.append((pen_plane, np.array((0.0, 1.0)),
                             np.array((center[0], center[1] - r))))
            if obstacle is not None:
                x0, x1, h = obstacle
                closest = np.array(
                    (min(max(center[0], x0), x1), min(max(center[1], 0.0), h))
                )
                d = center - closest
                dist = float(np.hypot(d[0], d[1]))
                if dist > 1e-12:
                    if dist < r:
                        hits.append((r - dist, d / dist, closest))
                else:
                    esc = [
                        (center[0] - x0, np.array((-1.0, 0.0))),
                        (x1 - center[0], np.array((1.0, 0.0))),
                        (h - center[1], np.array((0.0, 1.0))),
                    ]
                    depth, normal = min(esc, key=lambda e: e[0])
                    hits.append((depth + r, normal, center.copy()))
            for pen, normal, point in hits:
                arm = point - pos[i]
                v_pt = vel[i] + om[i] * np.array((arm[1], -arm[0]))
                # effective mass at the point caps the damping/friction
                # slopes at the explicit stability limit; the cap is shared
                # among the link's candidate circles because simultaneous
                # hits sum their impulses
                cr_n = _cross(arm, normal)
                cr_t = _cross(arm, np.array((normal[1], -normal[0])))
                m_eff_n = 1.0 / (m.inv_mass[i] + cr_n**2 * m.inv_inertia[i])
                m_eff_t = 1.0 / (m.inv_mass[i] + cr_t**2 * m.inv_inertia[i])
                cap_share = dt * max(1, int(n_cand))
                pen_rate = -float(v_pt @ normal)
                fn = k_n * pen + min(c_n_base, m_eff_n / cap_share) * pen_rate
                if fn < 0.0:
                    fn = 0.0
                tangent = np.array((normal[1], -normal[0]))
                v_t = float(v_pt @ tangent)
                ft = -np.sign(v_t) * min(
                    min(k_t, m_eff_t / cap_share) * abs(v_t), mu * fn
                )
                force = fn * normal + ft * tangent
                contacts.append((i, force, normal, point))
    return contacts


def step_substeps(m, world, geometry_full, base, base_vel, q, qd,
                  use_pd, control, kp_eff, kd_eff, n_substeps, out):
    """Advance `n_substeps`; aggregates peaks into `out` (dict of arrays).

    Returns the number of substeps completed (== n_substeps unless the
    state diverged). `base`, `base_vel`, `q`, `qd` are updated in place.
    """
    L, J = m.n_links, m.n_joints
    dt = world["dt"]
    g = world["gravity"]
    k_lim, c_lim = world["k_limit"], world["c_limit"]
    qd_max = world["qd_max"]
    peak = world["peak_torque_factor"]

    out["link_force"][:] = 0.0
    out["link_contact"][:] = 0
    out["joint_reaction"][:] = 0.0
    out["joint_ext"][:] = 0.0
    out["tau_total"][:] = 0.0
    out["motor_abs"][:] = 0.0
    out["motor_last"][:] = 0.0
    out["grf_last"][:] = 0.0
    out["grf_max"] = 0.0
    out["impulse"][:] = 0.0
    out["n_limit_max"] = 0
    out["n_qd_clamped"] = 0
    out["events"] = []

    inv_m_diag = np.empty(3 * L)
    inv_m_diag[0::3] = m.inv_mass
    inv_m_diag[1::3] = m.inv_mass
    inv_m_diag[2::3] = m.inv_inertia

    for sub in range(n_substeps):
        # velocities live at the pre-step configuration
        _, _, vel, om = forward_kinematics_arrays(m, base, base_vel, q, qd)
        new_base = base + dt * base_vel
        new_q = q + dt * qd
        th, pos, _, _ = forward_kinematics_arrays(
            m, new_base, base_vel, new_q, qd)

        force = np.zeros((L, 2))
        torque = np.zeros(L)
        force[:, 1] -= m.mass * g

        # spring part of PD; damping is handled implicitly below
        if use_pd:
            cap = m.torque_rated * peak
            spring = np.clip(kp_eff * (control - new_q), -cap, cap)
        else:
            spring = control.astype(np.float64).copy()

        # joint-limit stop springs; stop damping handled implicitly
        t_lim = np.zeros(J)
        limit_damp = np.zeros(J)
        over = new_q > m.limit_hi
        under = new_q < m.limit_lo
        t_lim[over] = -k_lim * (new_q[over] - m.limit_hi[over])
        t_lim[under] = k_lim * (m.limit_lo[under] - new_q[under])
        limit_damp[over | under] = c_lim
        n_limit = int(np.count_nonzero(over | under))

        for j in range(J):
            tq = spring[j] + t_lim[j]
            torque[m.jchild[j]] += tq
            torque[m.jparent[j]] -= tq

        contacts = _detect_contacts(
            m, th, pos, vel, om, world, geometry_full, dt
        )
        link_cforce = np.zeros((L, 2))
        grf = np.zeros(2)
        for i, f, normal, point in contacts:
            force[i] += f
            torque[i] += _cross(point - pos[i], f)
            link_cforce[i] += f
            grf += f

        # unconstrained velocity update
        vflat = np.empty(3 * L)
        vflat[0::3] = vel[:, 0] + dt * force[:, 0] * m.inv_mass
        vflat[1::3] = vel[:, 1] + dt * force[:, 1] * m.inv_mass
        vflat[2::3] = om + dt * torque * m.inv_inertia

        # joint constraints + implicit joint damping, one SPD system:
        # rows 0..2J-1 pin the anchors, rows 2J..3J-1 carry damping
        # impulses u_j with compliance 1/(dt * D_j)
        lam = np.zeros((J, 2))
        u = np.zeros(J)
        anchor_w = np.empty((J, 2))
        damping = (kd_eff if use_pd else np.zeros(J)) + limit_damp
        if J > 0:
            rp_w = np.empty((J, 2))
            rc_w = np.empty((J, 2))
            for j in range(J):
                rp_w[j] = _rot(th[m.jparent[j]]) @ m.anchor_p[j]
                rc_w[j] = _rot(th[m.jchild[j]]) @ m.anchor_c[j]
                anchor_w[j] = pos[m.jparent[j]] + rp_w[j]
            G = np.zeros((3 * J, 3 * L))
            for j in range(J):
                p, c = m.jparent[j], m.jchild[j]
                G[2 * j, 3 * c] = 1.0
                G[2 * j, 3 * c + 2] = rc_w[j][1]
                G[2 * j, 3 * p] = -1.0
                G[2 * j, 3 * p + 2] = -rp_w[j][1]
                G[2 * j + 1, 3 * c + 1] = 1.0
                G[2 * j + 1, 3 * c + 2] = -rc_w[j][0]
                G[2 * j + 1, 3 * p + 1] = -1.0
                G[2 * j + 1, 3 * p + 2] = rp_w[j][0]
                G[2 * J + j, 3 * c + 2] = 1.0
                G[2 * J + j, 3 * p + 2] = -1.0
            A = (G * inv_m_diag) @ G.T
            diag = np.full(3 * J, 1e-10)
            with np.errstate(divide="ignore"):
                diag[2 * J:] = np.where(
                    damping > 1e-12, 1.0 / (dt * np.maximum(damping, 1e-12)),
                    1e12,
                )
            A[np.diag_indices_from(A)] += diag
            rhs = -(G @ vflat)
            sol = np.linalg.solve(A, rhs)
            vflat = vflat + inv_m_diag * (G.T @ sol)
            lam = sol[: 2 * J].reshape(J, 2)
            u = sol[2 * J:]

        # generalized velocities, joint-rate clamp
        new_base_vel = np.array((vflat[0], vflat[1], vflat[2]))
        new_qd = np.empty(J)
        for j in range(J):
            new_qd[j] = vflat[3 * m.jchild[j] + 2] - vflat[3 * m.jparent[j] + 2]
        clamped = np.abs(new_qd) > qd_max
        n_clamped = int(np.count_nonzero(clamped))
        np.clip(new_qd, -qd_max, qd_max, out=new_qd)

        if not (
            np.all(np.isfinite(new_base))
            and np.all(np.isfinite(new_base_vel))
            and np.all(np.isfinite(new_q))
            and np.all(np.isfinite(new_qd))
        ):
            return sub

        base[:] = new_base
        base_vel[:] = new_base_vel
        q[:] = new_q
        qd[:] = new_qd

        # ------- readout -------
        # split the implicit damping impulse between motor and limit stop
        damp_torque = u / dt
        with np.errstate(invalid="ignore"):
            frac_motor = np.where(
                damping > 1e-12, (kd_eff if use_pd else 0.0) / np.maximum(damping, 1e-12), 0.0
            )
        motor = spring + damp_torque * frac_motor
        t_lim_total = t_lim + damp_torque * (1.0 - frac_motor)

        reaction = np.hypot(lam[:, 0], lam[:, 1]) / dt if J else np.zeros(0)

        tau_ext = t_lim_total.copy()
        for i, f, normal, point in contacts:
            pj = m.parent_joint[i]
            if pj >= 0:
                tau_ext[pj] += _cross(point - anchor_w[pj], f)
        for k in range(J):
            pk = m.jparent[k]
            pj = m.parent_joint[pk]
            if pj >= 0:
                rf = -lam[k] / dt
                tau_ext[pj] += _cross(anchor_w[k] - anchor_w[pj], rf)
                tau_ext[pj] -= t_lim_total[k]

        link_fmag = np.hypot(link_cforce[:, 0], link_cforce[:, 1])
        bigger = link_fmag > out["link_force"]
        out["link_force"][bigger] = link_fmag[bigger]
        out["link_contact"][link_fmag > 0.0] = 1
        np.maximum(out["joint_reaction"], reaction, out=out["joint_reaction"])
        swap = np.abs(tau_ext) > np.abs(out["joint_ext"])
        out["joint_ext"][swap] = tau_ext[swap]
        np.maximum(out["tau_total"], np.abs(motor + tau_ext), out=out["tau_total"])
        np.maximum(out["motor_abs"], np.abs(motor), out=out["motor_abs"])
        out["motor_last"][:] = motor
        out["grf_last"][:] = grf
        out["grf_max"] = max(out["grf_max"], float(np.hypot(grf[0], grf[1])))
        out["impulse"] += grf * dt
        out["n_limit_max"] = max(out["n_limit_max"], n_limit)
        out["n_qd_clamped"] += n_clamped
        if sub == n_substeps - 1:
            out["events"] = [
                (i, float(np.hypot(f[0], f[1])), normal.copy(), point.copy())
                for i, f, normal, point in contacts
            ]
            out["joint_reaction_last"] = reaction.copy()
            out["joint_ext_last"] = tau_ext.copy()
            out["link_force_last"] = link_fmag.copy()

    return n_substeps
