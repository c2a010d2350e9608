"""HTTP inference service for the trained predictor.

Three endpoints: POST /predict, GET /model, GET /health. The kinematic
boundary conditions are fixed server-side to the left-edge clamp (the only
family the model is trained on); the request schema reserves a `kinematic`
field but rejects any value in it. The loaded model is immutable, so
concurrent requests are safe and identical bodies yield identical responses.
"""

from __future__ import annotations

import time
from typing import Optional

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse
from pydantic import BaseModel, Field

from . import evaluators, fem
from .domain import BoundaryConditionSet, InputSample
from .evaluators import QualityCoefficients
from .predictor import Predictor, load_model, read_manifest

SCHEMA_VERSION = 1


class Load(BaseModel):
    node_x: int = Field(ge=0)
    node_y: int = Field(ge=0)
    fx: float = 0.0
    fy: float = 0.0


class PredictRequest(BaseModel):
    loads: list[Load]
    fill: float
    level: int = Field(default=4, ge=1)
    kinematic: Optional[dict] = None  # reserved; any value is rejected
    v: int = SCHEMA_VERSION


class ModelState:
    def __init__(self):
        self.predictor: Predictor | None = None
        self.manifest: dict | None = None

    def load(self, path: str):
        # atomic swap: build fully, then replace the references
        predictor = load_model(path)
        manifest = read_manifest(path)
        self.predictor, self.manifest = predictor, manifest


def _error(status: int, message: str, fieldname: str | None = None):
    body = {"error": message}
    if fieldname:
        body["field"] = fieldname
    return JSONResponse(status_code=status, content=body)


def create_app(model_path: str | None = None) -> FastAPI:
    app = FastAPI(title="pentopt inference service")
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
        allow_headers=["*"],
    )
    state = ModelState()
    app.state.model = state
    if model_path is not None:
        state.load(model_path)

    @app.exception_handler(RequestValidationError)
    async def validation_handler(request: Request, exc: RequestValidationError):
        first = exc.errors()[0]
        loc = [str(p) for p in first.get("loc", []) if p != "body"]
        return _error(400, first.get("msg", "invalid request"),
                      ".".join(loc) or None)

    @app.get("/health")
    async def health():
        if state.predictor is None:
            return _error(503, "model not loaded")
        return {"status": "ok"}

    @app.get("/model")
    async def model_manifest():
        if state.manifest is None:
            return _error(503, "model not loaded")
        m = state.manifest
        return {
            "v": SCHEMA_VERSION,
            "arch_hash": m["arch_hash"],
            "levels": m["architecture"]["levels"],
            "d_inp": m["architecture"]["d_inp"],
            "weights_sha256": m["weights_sha256"],
            "training_config": m.get("training_config"),
        }

    @app.post("/predict")
    async def predict(req: PredictRequest):
        predictor = state.predictor
        if predictor is None:
            return _error(503, "model not loaded")
        arch = predictor.arch
        if req.kinematic is not None:
            return _error(
                400, "kinematic boundary conditions are fixed to the "
                "left-edge clamp and cannot be set", "kinematic",
            )
        if not req.loads:
            return _error(400, "at least one force is required", "loads")
        if not 0.2 <= req.fill <= 0.8:
            return _error(400, f"fill {req.fill} outside [0.2, 0.8]", "fill")
        if req.level > arch.levels:
            return _error(
                400, f"level {req.level} beyond model levels {arch.levels}",
                "level",
            )
        bc = BoundaryConditionSet.left_edge_clamped(arch.d_inp)
        for i, load in enumerate(req.loads):
            if load.node_x > arch.d_inp or load.node_y > arch.d_inp:
                return _error(
                    400, f"node ({load.node_x}, {load.node_y}) outside the "
                    f"0..{arch.d_inp} grid", f"loads.{i}",
                )
            if load.node_x == 0:
                return _error(
                    422, f"node ({load.node_x}, {load.node_y}) lies on the "
                    "clamped left edge", f"loads.{i}",
                )
            # node_y counts rows from the top, node_x columns from the left
            bc.rsx[load.node_y, load.node_x] += load.fx
            bc.rsy[load.node_y, load.node_x] += load.fy
        if not np.any(bc.rs_vector()):
            return _error(400, "all forces are zero", "loads")

        sample = InputSample(bc=bc, m_tar=req.fill)
        t0 = time.perf_counter()
        fld = predictor.predict(sample, req.level)
        inference_ms = (time.perf_counter() - t0) * 1000.0

        cfg = (state.manifest or {}).get("training_config") or {}
        coeff = QualityCoefficients(
            alpha=cfg.get("alpha", 2.0), beta=cfg.get("beta", 5.0),
            gamma=cfg.get("gamma", 1.0), delta=cfg.get("delta", 1.0),
            f_k=cfg.get("f_k", 3.0), sigma2=cfg.get("sigma2", 0.05),
        )
        losses = evaluate_losses(fld, sample, coeff, cfg)
        return {
            "v": SCHEMA_VERSION,
            "d": fld.d,
            "densities": [float(v) for v in fld.x],
            "losses": losses,
            "inference_ms": inference_ms,
        }

    return app


def evaluate_losses(fld: DensityField, sample: InputSample,
                    coeff: QualityCoefficients, cfg: dict) -> dict:
    prob = fem.FemProblem(
        fld.level, sample.bc, penal=cfg.get("p", 3.0),
        E=cfg.get("E", 195000.0), nu=cfg.get("nu", 0.3),
        x_min=cfg.get("x_min", 0.001),
    )
    c = float(evaluators.compliance(fld.x, [prob]))
    m = float(evaluators.fill_deviation(fld.x, sample.m_tar))
    f = float(evaluators.checkerboard_loss(fld.x, coeff.f_k))
    p = float(evaluators.uncertainty_loss(fld.x, coeff.sigma2))
    return {"c": c, "m": m, "f": f, "p": p}
