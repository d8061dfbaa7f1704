"""Grid hierarchy workspace: per-level contexts, free-dof bookkeeping,
inter-level transfers, and V-cycle preconditioners whose coarse operators
are assembled from injected fine-level coefficients.

Vertex ids survive uniform refinement as a prefix, and the quadratic nodes
of a level coincide with the vertices of the next finer level, so injection
is plain slicing.
"""

from __future__ import annotations

import numpy as np

from .extension import extension_dirichlet
from .fem import TAYLOR_HOOD, FemContext, build_dofmap, compute_transform
from .flow import flow_dirichlet
from .forms import extension_jacobian, extension_stiffness, flow_jacobian
from .solvers import (
    MultigridConfig,
    VCycle,
    mixed_prolongation,
    p1_prolongation,
    restrict_transfer,
    vector_prolongation,
)


def _mg_config(config, system):
    """Accept a MultigridConfig, a SolverConfig, or None (defaults)."""
    if isinstance(config, MultigridConfig):
        return config
    if config is None:
        return MultigridConfig(smoother="ilu0" if system == "flow" else "jacobi")
    smoother = config.smoother_flow if system == "flow" \
        else config.smoother_extension
    return MultigridConfig(pre_smooth=config.pre_smooth,
                           post_smooth=config.post_smooth,
                           smoother=smoother,
                           omega=config.jacobi_omega)


class LevelStack:
    def __init__(self, hierarchy):
        self.hierarchy = hierarchy
        self.contexts = [FemContext(lv) for lv in hierarchy.levels]
        self._ext_stiffness = [None] * len(self.contexts)
        self._ext_free = [None] * len(self.contexts)
        self._flow_free = [None] * len(self.contexts)
        self._ext_transfers = None
        self._flow_transfers = None

    @property
    def num_levels(self):
        return len(self.contexts)

    @property
    def finest(self):
        return self.contexts[-1]

    def ext_stiffness(self, level=-1):
        level = range(self.num_levels)[level]
        if self._ext_stiffness[level] is None:
            self._ext_stiffness[level] = extension_stiffness(self.contexts[level])
        return self._ext_stiffness[level]

    def extension_free(self, level=-1):
        level = range(self.num_levels)[level]
        if self._ext_free[level] is None:
            dofmap, bc_dofs, _ = extension_dirichlet(self.contexts[level])
            self._ext_free[level] = np.setdiff1d(
                np.arange(dofmap.num_dofs), bc_dofs)
        return self._ext_free[level]

    def flow_free(self, level=-1, inflow=None):
        level = range(self.num_levels)[level]
        if self._flow_free[level] is None:
            from .flow import InflowSpec
            ctx = self.contexts[level]
            dofmap = build_dofmap(ctx.mesh, TAYLOR_HOOD)
            bc_dofs, _ = flow_dirichlet(ctx, dofmap, inflow or InflowSpec())
            self._flow_free[level] = np.setdiff1d(
                np.arange(dofmap.num_dofs), bc_dofs)
        return self._flow_free[level]

    def displacement_on_level(self, w, level):
        nv = self.contexts[level].mesh.num_vertices
        return np.asarray(w, dtype=float).reshape(-1, 2)[:nv]

    def scalar_on_level(self, field, level):
        nv = self.contexts[level].mesh.num_vertices
        return np.asarray(field, dtype=float)[:nv]

    def mixed_on_level(self, x, level):
        """Inject finest mixed coefficients to a coarser level: quadratic
        nodes of level l are the vertices of level l+1, pressure vertices
        are a prefix."""
        level = range(self.num_levels)[level]
        if level == self.num_levels - 1:
            return np.asarray(x, dtype=float)
        dm_fine = build_dofmap(self.finest.mesh, TAYLOR_HOOD)
        dm = build_dofmap(self.contexts[level].mesh, TAYLOR_HOOD)
        n2f = dm_fine.num_p2_nodes
        vn = x[: 2 * n2f].reshape(n2f, 2)
        p = x[2 * n2f:]
        out = np.empty(dm.num_dofs)
        out[: 2 * dm.num_p2_nodes] = vn[: dm.num_p2_nodes].reshape(-1)
        out[2 * dm.num_p2_nodes:] = p[: dm.mesh.num_vertices]
        return out

    def extension_transfers(self):
        """Free-to-free displacement prolongations, one per fine level."""
        if self._ext_transfers is None:
            self._ext_transfers = []
            for lvl in range(1, self.num_levels):
                full = vector_prolongation(p1_prolongation(self.hierarchy, lvl))
                self._ext_transfers.append(restrict_transfer(
                    full, self.extension_free(lvl), self.extension_free(lvl - 1)))
        return self._ext_transfers

    def flow_transfers(self):
        if self._flow_transfers is None:
            self._flow_transfers = []
            for lvl in range(1, self.num_levels):
                full = mixed_prolongation(self.hierarchy, lvl)
                self._flow_transfers.append(restrict_transfer(
                    full, self.flow_free(lvl), self.flow_free(lvl - 1)))
        return self._flow_transfers

    def extension_preconditioner(self, w, eta, config=None, transpose=False):
        """V-cycle for the linearized extension system at displacement w."""
        config = _mg_config(config, "extension")
        matrices = []
        for lvl in range(self.num_levels):
            ctx = self.contexts[lvl]
            w_l = self.displacement_on_level(w, lvl)
            eta_l = self.scalar_on_level(eta, lvl)
            jac = extension_jacobian(ctx, self.ext_stiffness(lvl), w_l, eta_l)
            free = self.extension_free(lvl)
            jff = jac.tocsr()[free][:, free]
            matrices.append(jff.T.tocsr() if transpose else jff)
        return VCycle(matrices, self.extension_transfers(), config)

    def flow_preconditioner(self, x, w, nu, config=None, convection=True,
                            transpose=False):
        """V-cycle for the linearized flow system at state x, transform w."""
        config = _mg_config(config, "flow")
        matrices = []
        for lvl in range(self.num_levels):
            ctx = self.contexts[lvl]
            ts = compute_transform(ctx, self.displacement_on_level(w, lvl))
            x_l = self.mixed_on_level(x, lvl)
            jac = flow_jacobian(ctx, x_l, ts, nu, convection).tocsr()
            free = self.flow_free(lvl)
            jff = jac[free][:, free]
            matrices.append(jff.T.tocsr() if transpose else jff)
        return VCycle(matrices, self.flow_transfers(), config)
