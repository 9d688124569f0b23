"""Run configuration schema (strict: unknown keys are rejected), artifact
manifest, and loaders that assemble toolkit objects from one JSON document.
"""
from __future__ import annotations

import hashlib
import importlib.resources
import json
import os
from typing import Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from . import __version__
from .ccm import CCM, SampleSpec, TubeConstants
from .geodesics import GeodesicOptions
from .model import QuadrotorParams, UncertainSystem, load_system, quadrotor_model
from .nlp import SQPOptions
from .ocp import (MPCConfig, ReferenceMap, constant_reference,
                  fd_reference_map, quadrotor_reference)
from .simulate import SimConfig


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SystemSection(StrictModel):
    builtin: Literal["quadrotor"] | None = None
    params: dict = Field(default_factory=dict)
    file: str | None = None
    package_data: str | None = None
    inline: dict | None = None

    def build(self, base_dir: str = ".") -> UncertainSystem:
        picked = [x is not None for x in (self.builtin, self.file,
                                          self.package_data, self.inline)]
        if sum(picked) != 1:
            raise ValueError(
                "system: specify exactly one of builtin|file|package_data|inline")
        if self.builtin == "quadrotor":
            qp_keys = {k: v for k, v in self.params.items()
                       if k in ("g", "m", "l", "J")}
            rest = {k: v for k, v in self.params.items() if k not in qp_keys}
            return quadrotor_model(QuadrotorParams(**qp_keys), **rest)
        if self.package_data is not None:
            ref = importlib.resources.files("tubempc").joinpath(
                "data", self.package_data)
            return load_system(json.loads(ref.read_text()))
        if self.file is not None:
            return load_system(_resolve(self.file, base_dir))
        return load_system(self.inline)


class CCMSection(StrictModel):
    file: str | None = None
    package_data: str | None = None

    def build(self, base_dir: str = ".") -> CCM:
        if (self.file is None) == (self.package_data is None):
            raise ValueError("ccm: specify exactly one of file|package_data")
        if self.package_data is not None:
            ref = importlib.resources.files("tubempc").joinpath(
                "data", self.package_data)
            return CCM.from_json(json.loads(ref.read_text()))
        return CCM.load(_resolve(self.file, base_dir))


class SampleSection(StrictModel):
    x_lo: list[float]
    x_hi: list[float]
    u_lo: list[float]
    u_hi: list[float]
    n_samples: int = 2000
    method: Literal["sobol", "grid"] = "sobol"
    grid_counts: list[int] | None = None
    seed: int = 0
    filter_constraints: bool = False

    def build(self) -> SampleSpec:
        return SampleSpec(x_lo=self.x_lo, x_hi=self.x_hi, u_lo=self.u_lo,
                          u_hi=self.u_hi, n_samples=self.n_samples,
                          method=self.method,
                          grid_counts=None if self.grid_counts is None
                          else tuple(self.grid_counts),
                          seed=self.seed,
                          filter_constraints=self.filter_constraints)


class ConstantsSection(StrictModel):
    file: str | None = None
    package_data: str | None = None
    safety_factor: float = 1.05
    refine: bool = True

    def load(self, base_dir: str = ".") -> TubeConstants | None:
        if self.package_data is not None:
            ref = importlib.resources.files("tubempc").joinpath(
                "data", self.package_data)
            return TubeConstants.from_json(json.loads(ref.read_text()))
        if self.file is not None:
            with open(_resolve(self.file, base_dir)) as fh:
                return TubeConstants.from_json(json.load(fh))
        return None


class SolverSection(StrictModel):
    max_iter: int = 120
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-8

    def build(self) -> SQPOptions:
        return SQPOptions(max_iter=self.max_iter, tol_kkt=self.tol_kkt,
                          tol_feas=self.tol_feas)


class MPCSection(StrictModel):
    N: int
    T_s: float
    Q: list  # full matrix or diagonal
    R: list
    substeps: int = 1
    geodesic_degree: int = 2
    norm_eps: float = 1e-8
    enforce_substeps: bool = False
    solver: SolverSection = Field(default_factory=SolverSection)

    def build(self) -> MPCConfig:
        def mat(v):
            a = np.asarray(v, float)
            return np.diag(a) if a.ndim == 1 else a
        return MPCConfig(N=self.N, T_s=self.T_s, Q=mat(self.Q), R=mat(self.R),
                         substeps=self.substeps,
                         geodesic_degree=self.geodesic_degree,
                         norm_eps=self.norm_eps,
                         enforce_substeps=self.enforce_substeps,
                         solver=self.solver.build())


class ReferenceSection(StrictModel):
    type: Literal["quadrotor_hover", "constant", "steady_state"]
    z_ref: list[float] | None = None
    v_ref: list[float] | None = None
    C: list | None = None
    D: list | None = None
    y_d: list[float] | None = None

    def build(self, sys: UncertainSystem) -> ReferenceMap:
        if self.type == "quadrotor_hover":
            return quadrotor_reference(sys)
        if self.type == "constant":
            if self.z_ref is None or self.v_ref is None:
                raise ValueError("constant reference needs z_ref and v_ref")
            return constant_reference(np.asarray(self.z_ref),
                                      np.asarray(self.v_ref),
                                      sys.n, sys.m, sys.p)
        return fd_reference_map(
            sys,
            None if self.C is None else np.asarray(self.C, float),
            None if self.D is None else np.asarray(self.D, float),
            None if self.y_d is None else np.asarray(self.y_d, float))


class SimSection(StrictModel):
    n_steps: int
    seed: int = 0
    x0: list[float]
    theta_true: list[float]
    n_m: int = 1
    truth_substeps: int = 4
    adaptation: bool = True
    rigid_tube: bool = False
    rigid_delta: float = 0.0
    estimator: Literal["exact", "fixed"] = "exact"

    def build(self) -> SimConfig:
        return SimConfig(n_steps=self.n_steps, seed=self.seed,
                         x0=np.asarray(self.x0, float),
                         theta_true=np.asarray(self.theta_true, float),
                         n_m=self.n_m, truth_substeps=self.truth_substeps,
                         adaptation=self.adaptation,
                         rigid_tube=self.rigid_tube,
                         rigid_delta=self.rigid_delta,
                         estimator=self.estimator)


class GeodesicSection(StrictModel):
    degree: int = 2
    grad_tol: float = 1e-8
    max_iter: int = 200

    def build(self) -> GeodesicOptions:
        return GeodesicOptions(degree=self.degree, grad_tol=self.grad_tol,
                               max_iter=self.max_iter)


class ScenarioSection(StrictModel):
    initial_paths: list[list[list[float]]] = Field(default_factory=list)


class VerifySection(StrictModel):
    tol_rel: float = 1e-6


class RunConfig(StrictModel):
    """Top-level config document; sections map one-to-one to modules."""

    system: SystemSection
    ccm: CCMSection | None = None
    sample_spec: SampleSection | None = None
    constants: ConstantsSection = Field(default_factory=ConstantsSection)
    mpc: MPCSection | None = None
    reference: ReferenceSection | None = None
    sim: SimSection | None = None
    geodesic: GeodesicSection = Field(default_factory=GeodesicSection)
    scenario: ScenarioSection = Field(default_factory=ScenarioSection)
    verify: VerifySection = Field(default_factory=VerifySection)


def _resolve(path: str, base_dir: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def load_config(path_or_dict, base_dir: str | None = None) -> tuple[RunConfig, str]:
    if isinstance(path_or_dict, (str, bytes, os.PathLike)):
        with open(path_or_dict) as fh:
            doc = json.load(fh)
        base = base_dir or os.path.dirname(os.path.abspath(path_or_dict))
    else:
        doc = path_or_dict
        base = base_dir or "."
    return RunConfig.model_validate(doc), base


def content_hash(cfg: RunConfig, base_dir: str) -> str:
    """Reproducible digest of the resolved config plus referenced files."""
    h = hashlib.sha256()
    h.update(json.dumps(cfg.model_dump(), sort_keys=True).encode())
    for path in (cfg.system.file,
                 cfg.ccm.file if cfg.ccm else None,
                 cfg.constants.file):
        if path:
            with open(_resolve(path, base_dir), "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def write_manifest(out_dir: str, command: str, cfg: RunConfig, base_dir: str,
                   seed: int | None, config_path: str | None) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": config_path,
        "seed": seed,
        "out_dir": out_dir,
        "version": __version__,
        "input_hash": content_hash(cfg, base_dir),
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest
