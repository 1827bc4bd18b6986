"""HTTP service exposing the backbone, training harness, and sweeps.

Models are built once, registered under a name, and then addressed by
that name for forward passes, gradient checks, and training.  Sweeps and
parameter counting are stateless.  A single registry lock serializes all
model-touching work: training mutates parameters in place, so concurrent
reads of a model being trained would otherwise race.
"""
from __future__ import annotations

import base64
import io
import itertools
import json
import threading
from typing import Optional

import numpy as np
from fastapi import FastAPI, HTTPException, Query

from . import __version__
from .backbone import (Model, build_variant, config_param_count,
                       count_params, forward, resolve_variant, stage_plan,
                       variant_config)
from .fileio import checkpoint_bytes, csv_text, parse_config, \
    restore_checkpoint_bytes
from .harness import (SweepAborted, gradient_check, gen_synthetic,
                      run_sweep, train)
from .schemas import (BuildRequest, BuildResponse, ForwardRequest,
                      ForwardResponse, GradcheckRequest, GradcheckResponse,
                      HealthResponse, MetricsBody, ModelListResponse,
                      ParamsResponse, SweepRequest, SweepResponse,
                      SweepRecordBody, TrainRequest, TrainResponse,
                      VariantCount)

__all__ = ["create_app", "app"]


def _parse_raw(raw: dict):
    try:
        return parse_config(io.StringIO(json.dumps(raw)))
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


def _metrics_body(m) -> Optional[MetricsBody]:
    return None if m is None else MetricsBody(**m._asdict())


def create_app() -> FastAPI:
    app = FastAPI(title="hyneter", version=__version__)
    registry: dict[str, Model] = {}
    lock = threading.RLock()
    auto_names = itertools.count(1)

    def _get(name: str) -> Model:
        model = registry.get(name)
        if model is None:
            raise HTTPException(status_code=404,
                                detail=f"no model named {name!r}")
        return model

    @app.get("/health", response_model=HealthResponse)
    def health() -> HealthResponse:
        return HealthResponse(status="ok", version=__version__)

    @app.post("/models", response_model=BuildResponse)
    def build(req: BuildRequest) -> BuildResponse:
        with lock:
            if req.checkpoint_b64 is not None:
                if req.config:
                    raise HTTPException(
                        status_code=422,
                        detail="pass either config or checkpoint_b64, "
                               "not both")
                try:
                    blob = base64.b64decode(req.checkpoint_b64,
                                            validate=True)
                    model = restore_checkpoint_bytes(blob)
                except (ValueError, KeyError) as exc:
                    raise HTTPException(status_code=422,
                                        detail=str(exc)) from exc
            else:
                parsed = _parse_raw(req.config)
                model = build_variant(parsed.model, seed=req.seed)
            name = req.name or f"m{next(auto_names):04d}"
            if name in registry:
                raise HTTPException(status_code=409,
                                    detail=f"model {name!r} already exists")
            registry[name] = model
            return BuildResponse(name=name, param_count=count_params(model),
                                 config=model.config.to_dict())

    @app.get("/models", response_model=ModelListResponse)
    def list_models() -> ModelListResponse:
        with lock:
            return ModelListResponse(models=sorted(registry))

    @app.delete("/models/{name}")
    def delete_model(name: str) -> dict:
        with lock:
            _get(name)
            del registry[name]
            return {"deleted": name}

    @app.post("/models/{name}/forward", response_model=ForwardResponse)
    def run_forward(name: str, req: ForwardRequest) -> ForwardResponse:
        with lock:
            model = _get(name)
            size = model.config.image_size
            if req.images_b64 is not None:
                if req.images_shape is None:
                    raise HTTPException(
                        status_code=422,
                        detail="images_b64 requires images_shape")
                blob = base64.b64decode(req.images_b64)
                count = int(np.prod(req.images_shape))
                if len(blob) != count * 8:
                    raise HTTPException(
                        status_code=422,
                        detail=f"images payload holds {len(blob)} bytes "
                               f"but shape {req.images_shape} needs "
                               f"{count * 8}")
                images = np.frombuffer(blob, dtype="<f8").reshape(
                    req.images_shape).astype(np.float64)
            else:
                rng = np.random.default_rng(req.image_seed)
                images = rng.standard_normal((req.batch, 3, size, size))
            try:
                stage_maps, logits = forward(model, images)
            except ValueError as exc:
                raise HTTPException(status_code=422,
                                    detail=str(exc)) from exc
            n = images.shape[0]
            expected = [(n, c, g, g) for c, g, _ in stage_plan(model.config)]
            shapes = [list(sm.data.shape) for sm in stage_maps]
            audit = [tuple(s) for s in shapes] == expected
            return ForwardResponse(stage_shapes=shapes,
                                   logits=logits.data.tolist(),
                                   audit_passed=audit)

    @app.post("/models/{name}/gradcheck", response_model=GradcheckResponse)
    def run_gradcheck(name: str, req: GradcheckRequest) -> GradcheckResponse:
        with lock:
            model = _get(name)
            res = gradient_check(model, samples=req.samples, seed=req.seed)
            return GradcheckResponse(worst_rel_err=res.worst_rel_err,
                                     checked=res.checked,
                                     worst_path=res.worst_path,
                                     passed=res.worst_rel_err
                                     <= req.tolerance)

    @app.post("/models/{name}/train", response_model=TrainResponse)
    def run_train(name: str, req: TrainRequest) -> TrainResponse:
        with lock:
            model = _get(name)
            extra = set(req.config) - {"train", "task"}
            if extra:
                raise HTTPException(
                    status_code=422,
                    detail=f"unknown key {sorted(extra)[0]!r}: the "
                           f"architecture is fixed at build time; only "
                           f"'train' and 'task' sections apply")
            parsed = _parse_raw({**model.config.to_dict(), **req.config})
            task = gen_synthetic(parsed.task, parsed.train.seed)
            result = train(model, task, parsed.train,
                           eval_every=req.eval_every)
            ckpt = None
            if req.return_checkpoint:
                ckpt = base64.b64encode(checkpoint_bytes(model)).decode()
            return TrainResponse(
                steps_run=len(result.losses),
                losses=result.losses,
                evals=[(s, _metrics_body(m)) for s, m in result.evals],
                final_metrics=_metrics_body(result.final_metrics),
                aborted=result.aborted,
                checkpoint_b64=ckpt)

    @app.post("/sweep", response_model=SweepResponse)
    def run_sweep_endpoint(req: SweepRequest) -> SweepResponse:
        if not req.values:
            raise HTTPException(status_code=422,
                                detail="values must not be empty")
        parsed = _parse_raw(req.config)
        try:
            records = run_sweep(req.factor, req.values, parsed.model,
                                parsed.task, parsed.train)
            error = None
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        except SweepAborted as exc:
            records = exc.records
            error = str(exc)
        bodies = [SweepRecordBody(**vars(r)) for r in records]
        return SweepResponse(records=bodies, csv_text=csv_text(records),
                             error=error)

    @app.get("/params", response_model=ParamsResponse)
    def params(variants: str = Query("1.0,plus,max")) -> ParamsResponse:
        names = [v.strip() for v in variants.split(",") if v.strip()]
        if not names:
            raise HTTPException(status_code=422,
                                detail="variants must name at least one "
                                       "variant")
        counts: dict[str, VariantCount] = {}
        order = []
        try:
            for name in names:
                full = resolve_variant(name)
                cfg = variant_config(full)
                counts[full] = VariantCount(
                    total=config_param_count(cfg, include_head=True),
                    backbone=config_param_count(cfg, include_head=False))
                order.append(full)
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc)) from exc
        ratios = {}
        base = order[0]
        for other in order[1:]:
            ratios[f"{other}/{base}"] = (counts[other].backbone
                                         / counts[base].backbone)
        return ParamsResponse(counts=counts, ratios=ratios)

    return app


app = create_app()
