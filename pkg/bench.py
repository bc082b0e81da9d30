"""Benchmark catalog: closed-form fields, problem construction, case runs and convergence reports."""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np
import pandas as pd

from adaptivity import AdaptiveTrace, Problem, adaptive_solve_loop
from assembly import Traction
from config import CaseConfig, SolverSettings, emit_case_config, get_settings
from errors import BenchmarkError, WeaksymError
from estimators import compliance_norm, l2_norm, write_indicators
from fe_core import Discretization
from material import Material
from mesh import builtin_geometry, save_mesh, uniform_refine

logger = logging.getLogger(__name__)

SLOPE_COLUMNS = ["eta", "eta_inc", "e_C_sigma", "e_C_u", "e_mean", "e_inc_sigma", "e_inc_u"]


def _stress_times_normal(stress: np.ndarray, normals: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", stress, normals)


@dataclass
class LShapeExact:
    """Singular plane strain solution at the re-entrant corner (origin), traction free on both faces.

    The closed form is written in a corner frame whose x'-axis bisects the material
    wedge, theta' in (-3pi/4, 3pi/4). The wedge of the built-in L-shape opens
    toward -x, so x' = -x and y' = -y; displacements flip sign, stresses do not.
    """

    material: Material
    alpha: float = 0.544483737
    Q: float = 0.543075579
    singular_point: np.ndarray = field(default_factory=lambda: np.zeros(2))
    norms: Optional[Tuple[float, float]] = None

    def __post_init__(self):
        if self.material.mode != "plane_strain":
            raise BenchmarkError("The L-shape solution is a plane strain solution", {"mode": self.material.mode})

    @property
    def kappa(self) -> float:
        return self.material.kappa

    @staticmethod
    def polar(x: np.ndarray):
        x = np.asarray(x, dtype=float)
        xl, yl = -x[..., 0], -x[..., 1]
        r = np.hypot(xl, yl)
        if np.any(r == 0):
            raise BenchmarkError("The L-shape exact solution is singular at the origin")
        return r, np.arctan2(yl, xl)

    def local_displacement(self, r, theta) -> np.ndarray:
        a, Q, k, mu = self.alpha, self.Q, self.kappa, self.material.mu
        c = r ** a / (2 * mu)
        ux = c * ((k - Q * (a + 1)) * np.cos(a * theta) - a * np.cos((a - 2) * theta))
        uy = c * ((k + Q * (a + 1)) * np.sin(a * theta) + a * np.sin((a - 2) * theta))
        return np.stack([ux, uy], axis=-1)

    def local_stress(self, r, theta) -> np.ndarray:
        a, Q = self.alpha, self.Q
        c = a * r ** (a - 1)
        sxx = c * ((2 - Q * (a + 1)) * np.cos((a - 1) * theta) - (a - 1) * np.cos((a - 3) * theta))
        syy = c * ((2 + Q * (a + 1)) * np.cos((a - 1) * theta) + (a - 1) * np.cos((a - 3) * theta))
        sxy = c * ((a - 1) * np.sin((a - 3) * theta) + Q * (a + 1) * np.sin((a - 1) * theta))
        return np.stack([np.stack([sxx, sxy], -1), np.stack([sxy, syy], -1)], -2)

    def displacement(self, x: np.ndarray) -> np.ndarray:
        return -self.local_displacement(*self.polar(x))

    def stress(self, x: np.ndarray) -> np.ndarray:
        return self.local_stress(*self.polar(x))

    def strain(self, x: np.ndarray) -> np.ndarray:
        return self.material.compliance_apply(self.stress(x))

    def traction(self, x: np.ndarray, normals: np.ndarray) -> np.ndarray:
        return _stress_times_normal(self.stress(x), normals)

    def validate_traction_free(self, samples: int = 50, tol: Optional[float] = None) -> float:
        """Largest |sigma n| relative to max |sigma| over samples on both re-entrant faces."""
        tol = tol if tol is not None else get_settings().traction_free_tol
        worst = 0.0
        r = np.linspace(0.02, 1.0, samples)
        for phi in (np.pi / 4, -np.pi / 4):
            direction = np.array([np.cos(phi), np.sin(phi)])
            normal = np.array([-direction[1], direction[0]])
            pts = r[:, None] * direction
            sigma = self.stress(pts)
            tn = np.linalg.norm(_stress_times_normal(sigma, normal), axis=-1)
            worst = max(worst, float(tn.max() / np.abs(sigma).max()))
        if worst > tol:
            raise BenchmarkError("L-shape exact stress is not traction free on the re-entrant faces",
                                 {"relative_traction": worst, "tol": tol})
        return worst


def lshape_exact_fields(m: Material, point: np.ndarray) -> Dict[str, np.ndarray]:
    exact = LShapeExact(m)
    return {"u": exact.displacement(point), "sigma": exact.stress(point)}


@dataclass
class ManufacturedExact:
    """u = (phi, phi) with phi = x(1-x)y(1-y) on the unit square; zero on the boundary."""

    material: Material
    singular_point: Optional[np.ndarray] = None
    norms: Optional[Tuple[float, float]] = None

    @staticmethod
    def _phi(x):
        X, Y = x[..., 0], x[..., 1]
        return (X * (1 - X) * Y * (1 - Y), (1 - 2 * X) * Y * (1 - Y), X * (1 - X) * (1 - 2 * Y),
                -2 * Y * (1 - Y), (1 - 2 * X) * (1 - 2 * Y), -2 * X * (1 - X))

    def displacement(self, x: np.ndarray) -> np.ndarray:
        p = self._phi(np.asarray(x, dtype=float))[0]
        return np.stack([p, p], axis=-1)

    def strain(self, x: np.ndarray) -> np.ndarray:
        _, px, py, _, _, _ = self._phi(np.asarray(x, dtype=float))
        shear = 0.5 * (px + py)
        return np.stack([np.stack([px, shear], -1), np.stack([shear, py], -1)], -2)

    def stress(self, x: np.ndarray) -> np.ndarray:
        return self.material.elasticity_apply(self.strain(x), check_symmetry=False)

    def body_load(self, x: np.ndarray) -> np.ndarray:
        _, _, _, pxx, pxy, pyy = self._phi(np.asarray(x, dtype=float))
        mu, lam = self.material.mu, self.material.lambda_eff
        div0 = 2 * mu * pxx + lam * (pxx + pxy) + mu * (pxy + pyy)
        div1 = mu * (pxx + pxy) + 2 * mu * pyy + lam * (pxy + pyy)
        return -np.stack([div0, div1], axis=-1)


def constant_traction(value) -> Traction:
    value = np.asarray(value, dtype=float)

    def traction(x, normals):
        return np.broadcast_to(value, np.shape(x)).copy()
    return traction


def reference_norms(exact, cfg: CaseConfig, refinements: int = 3, order: int = 20,
                    levels: int = 8) -> Tuple[float, float]:
    """(||sigma||_C, ||sigma||_0) of the closed-form stress on a fixed fine mesh of the case geometry."""
    mesh = builtin_geometry(cfg.geometry, cfg.resolution)
    for _ in range(refinements):
        mesh = uniform_refine(mesh)
    disc = Discretization(mesh, cfg.family_config)
    point = exact.singular_point
    norm_C = compliance_norm(disc, exact.material, exact.stress, order, point, levels)
    norm_0 = l2_norm(disc, exact.stress, order, point, levels)
    logger.debug(f"Reference norms for {cfg.geometry}: C={norm_C:.10e} L2={norm_0:.10e}")
    return norm_C, norm_0


def make_problem(cfg: CaseConfig, settings: Optional[SolverSettings] = None) -> Problem:
    material = Material.from_young_poisson(cfg.E, cfg.nu, cfg.mode)
    mesh = builtin_geometry(cfg.geometry, cfg.resolution)
    if cfg.geometry == "lshape":
        exact = LShapeExact(material)
        exact.validate_traction_free(tol=(settings or get_settings()).traction_free_tol)
        exact.norms = reference_norms(exact, cfg)
        return Problem(mesh, material, tractions={"traction": exact.traction}, exact=exact, name=cfg.case_name)
    if cfg.geometry == "cook":
        tractions = {"load": constant_traction([0.0, cfg.cook_load]), "free": constant_traction([0.0, 0.0])}
        return Problem(mesh, material, tractions=tractions, name=cfg.case_name)
    exact = ManufacturedExact(material)
    return Problem(mesh, material, body_load=exact.body_load, exact=exact, name=cfg.case_name)


def _attach_log(directory: Path) -> logging.Handler:
    handler = logging.FileHandler(directory / "debug.log", mode="w")
    handler.setLevel(logging.DEBUG)
    handler.setFormatter(logging.Formatter("%(asctime)s - %(name)s - %(levelname)s - %(message)s"))
    logging.getLogger().addHandler(handler)
    return handler


def run_case(cfg: CaseConfig, settings: Optional[SolverSettings] = None,
             out_dir: Optional[Union[str, Path]] = None) -> AdaptiveTrace:
    """Run one study and write trace.csv, indicators_<iter>.csv, mesh_final.msh2d and the case config."""
    settings = settings or get_settings()
    directory = Path(out_dir or cfg.out_dir) / cfg.case_name
    directory.mkdir(parents=True, exist_ok=True)
    handler = _attach_log(directory)
    try:
        (directory / "case.json").write_text(emit_case_config(cfg))
        problem = make_problem(cfg, settings)
        trace_path = directory / "trace.csv"
        partial = AdaptiveTrace(name=cfg.case_name)

        def on_iteration(it, mesh, sol, report, row):
            partial.rows.append(row)
            partial.write_csv(trace_path)
            write_indicators(report, directory / f"indicators_{it}.csv")

        logger.info(f"Running case {cfg.case_name}")
        trace = adaptive_solve_loop(
            problem, cfg.family_config, estimator=cfg.estimator, max_dofs=cfg.max_dofs,
            max_iters=cfg.max_iters, uniform=cfg.uniform, marking_fraction=cfg.marking_fraction,
            record_timings=cfg.record_timings, grading_levels=cfg.grading_levels,
            on_iteration=on_iteration, name=cfg.case_name,
        )
        if problem.exact is None:
            # no closed form: normalize by the discrete stress on the finest mesh
            report = trace.last_report
            trace.renormalize(report.sigma_h_C, report.sigma_h_0, problem.material.mu)
        trace.write_csv(trace_path)
        save_mesh(trace.final_mesh, directory / "mesh_final.msh2d")
        logger.info(f"Finished case {cfg.case_name}: {len(trace.rows)} iterations")
        return trace
    except WeaksymError as e:
        logger.error(f"Case {cfg.case_name} failed: {e}", exc_info=True)
        raise e.with_context(case=cfg.case_name)
    finally:
        logging.getLogger().removeHandler(handler)
        handler.close()


def convergence_slope(n: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of log(values) against log(n) over the last half of the points."""
    n = np.asarray(n, dtype=float)
    values = np.asarray(values, dtype=float)
    if len(n) < 3:
        raise BenchmarkError("At least 3 iterations are needed for a slope", {"iterations": len(n)})
    start = len(n) // 2
    return float(np.polyfit(np.log(n[start:]), np.log(values[start:]), 1)[0])


def _primary_column(frame: pd.DataFrame) -> str:
    if frame["e_C_sigma"].notna().all():
        return "e_C_sigma"
    return "eta"


def emit_report(traces: List[AdaptiveTrace], out_dir: Union[str, Path]) -> pd.DataFrame:
    """Write summary.txt with fitted slopes per error column and report.svg with one series per trace."""
    if not traces:
        raise BenchmarkError("emit_report needs at least one trace")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for trace in traces:
        frame = trace.to_frame()
        record = {"case": trace.name, "iterations": len(frame), "N_final": int(frame["N"].iloc[-1])}
        for column in SLOPE_COLUMNS:
            values = frame[column].astype(float)
            if values.notna().all() and (values > 0).all():
                record[f"slope_{column}"] = convergence_slope(frame["N"], values)
        records.append(record)
    summary = pd.DataFrame(records)
    (out_dir / "summary.txt").write_text(summary.to_string(index=False, float_format=lambda v: f"{v:.3f}") + "\n")

    plt.rcParams["svg.fonttype"] = "none"
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for trace in traces:
        frame = trace.to_frame()
        column = _primary_column(frame)
        ax.loglog(frame["N"], frame[column].astype(float), marker="o", label=f"{trace.name}")
    ax.set_xlabel("number of elements N")
    ax.set_ylabel("relative error / estimator")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "report.svg", format="svg", metadata={"Date": None})
    plt.close(fig)
    logger.info(f"Report for {len(traces)} case(s) written to {out_dir}")
    return summary
