"""SOLVE -> ESTIMATE -> MARK -> REFINE with maximum-strategy marking."""
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Union

import numpy as np
import pandas as pd

from assembly import BodyLoad, MixedSolution, Traction, assemble, solve_saddle, zero_load
from config import FamilyConfig
from errors import ValidationError, WeaksymError
from estimators import EstimateReport, ExactSolution, estimate
from fe_core import Discretization, build_dof_layout
from material import Material
from mesh import Mesh2D, bisect_refine, uniform_refine
from postprocess import postprocess

logger = logging.getLogger(__name__)

TRACE_COLUMNS = ["iter", "N", "n_S", "n_R", "n_V", "eta", "eta_inc", "osc_f", "osc_g",
                 "e_C_sigma", "e_C_u", "e_mean", "e_inc_sigma", "e_inc_u", "seconds"]


@dataclass
class Problem:
    mesh: Mesh2D
    material: Material
    body_load: BodyLoad = zero_load
    tractions: Dict[str, Traction] = field(default_factory=dict)
    exact: Optional[ExactSolution] = None
    name: str = "problem"


@dataclass
class AdaptiveTrace:
    name: str
    rows: List[dict] = field(default_factory=list)
    marked: List[np.ndarray] = field(default_factory=list)
    final_mesh: Optional[Mesh2D] = None    # last solved mesh
    next_mesh: Optional[Mesh2D] = None     # refinement of final_mesh that was not solved
    last_report: Optional[EstimateReport] = None
    weighted: List[tuple] = field(default_factory=list)   # (eta, eta_inc) numerators per row

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=TRACE_COLUMNS)

    def write_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.12e")

    def renormalize(self, norm_C: float, norm_0: float, mu: float) -> None:
        """Rescale the relative estimator columns to reference norms fixed after the run."""
        for row, (eta_w, inc_w) in zip(self.rows, self.weighted):
            row["eta"] = eta_w / norm_C
            row["eta_inc"] = inc_w * np.sqrt(mu) / norm_0


def mark_elements(report: Union[EstimateReport, np.ndarray], which: str = "eta", fraction: float = 0.25) -> np.ndarray:
    """Elements whose indicator is at least fraction times the largest one."""
    if which not in ("eta", "eta_inc"):
        raise ValidationError(f"Unknown estimator '{which}', expected eta or eta_inc", {"estimator": which})
    if isinstance(report, EstimateReport):
        indicators = report.eta_local if which == "eta" else report.eta_inc_local
    else:
        indicators = np.asarray(report, dtype=float)
    if indicators.size == 0:
        raise ValidationError("cannot mark an empty indicator set")
    top = float(np.max(indicators))
    if not np.isfinite(top) or top <= 0.0:
        logger.warning(f"Degenerate indicators (max={top}); marking all {indicators.size} elements")
        return np.arange(indicators.size)
    return np.nonzero(indicators >= fraction * top)[0]


def solve_problem(problem: Problem, mesh: Mesh2D, family: FamilyConfig):
    disc = Discretization(mesh, family)
    system = assemble(mesh, problem.material, family, problem.body_load, problem.tractions, disc=disc)
    sol = solve_saddle(system)
    return sol, postprocess(sol)


def adaptive_solve_loop(problem: Problem, family: FamilyConfig, estimator: str = "eta",
                        max_dofs: Optional[int] = None, max_iters: Optional[int] = None,
                        uniform: bool = False, marking_fraction: float = 0.25,
                        record_timings: bool = False, grading_levels: int = 4,
                        on_iteration: Optional[Callable[[int, Mesh2D, MixedSolution, EstimateReport, dict], None]] = None,
                        name: Optional[str] = None) -> AdaptiveTrace:
    if max_dofs is None and max_iters is None:
        raise ValidationError("one of max_dofs or max_iters is required")
    name = name or problem.name
    trace = AdaptiveTrace(name=name)
    mesh = problem.mesh
    it = 0
    while True:
        start = time.perf_counter()
        try:
            sol, post = solve_problem(problem, mesh, family)
            report = estimate(sol, post, problem.exact, levels=grading_levels)
            if uniform:
                marked = np.arange(mesh.n_triangles)
                next_mesh = uniform_refine(mesh)
            else:
                marked = mark_elements(report, estimator, marking_fraction)
                next_mesh = bisect_refine(mesh, marked)
        except WeaksymError as e:
            raise e.with_context(iteration=it, case=name)

        layout = sol.layout
        exact = report.exact
        row = {
            "iter": it, "N": mesh.n_triangles, "n_S": layout.n_S, "n_R": layout.n_R, "n_V": layout.n_V,
            "eta": report.eta, "eta_inc": report.eta_inc, "osc_f": report.osc_f, "osc_g": report.osc_g,
            "e_C_sigma": exact.e_C_sigma if exact else None, "e_C_u": exact.e_C_u if exact else None,
            "e_mean": exact.e_mean if exact else None, "e_inc_sigma": exact.e_inc_sigma if exact else None,
            "e_inc_u": exact.e_inc_u if exact else None,
            "seconds": time.perf_counter() - start if record_timings else None,
        }
        trace.rows.append(row)
        trace.weighted.append((report.hypercircle.weighted, report.incompressible.weighted))
        trace.marked.append(marked)
        trace.final_mesh, trace.next_mesh, trace.last_report = mesh, next_mesh, report
        logger.info(f"[{name}] iter {it}: N={mesh.n_triangles} dofs={layout.n_total} "
                    f"eta={report.eta:.4e} eta_inc={report.eta_inc:.4e} marked={len(marked)}")
        if on_iteration is not None:
            on_iteration(it, mesh, sol, report, row)

        it += 1
        if max_iters is not None and it >= max_iters:
            break
        if max_dofs is not None and build_dof_layout(next_mesh, family).n_total > max_dofs:
            break
        mesh = next_mesh
    return trace
