"""Read-only HTTP service exposing scoring, retrieval, saliency, and
discrepancy checks over frozen artifacts.

All responses are JSON with stable field names; errors use {code, message}.
The CLI and this service share the Runtime inference path, and both serialize
through runtime.to_json, so equal requests produce byte-equal payloads.
"""

from __future__ import annotations

import os
from pathlib import Path

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from pydantic import BaseModel

from .inference import InferenceError
from .runtime import Runtime, to_json
from .saliency import SmoothGradConfig
from .volumes import SequenceType

ARTIFACTS_ENV = "BRAINALIGN_ARTIFACTS"


class ScoreRequest(BaseModel):
    exam_id: str
    queries: list[str]


class RetrieveRequest(BaseModel):
    query: str
    sequence: str | None = None
    k: int = 15


class SaliencyRequest(BaseModel):
    exam_id: str
    sequence: str
    query: str
    smooth_samples: int | None = None
    noise_std: float = 0.1
    seed: int = 0
    axis: int | None = None


class DiscrepancyRequest(BaseModel):
    exam_id: str
    report_text: str
    templates: list[str] | None = None
    theta_scan: float = 0.5
    theta_report: float = 0.3


def _json_response(payload, status_code: int = 200) -> Response:
    return Response(content=to_json(payload), status_code=status_code,
                    media_type="application/json")


def _error(status: int, code: str, message: str) -> Response:
    return _json_response({"code": code, "message": message}, status_code=status)


def create_app(artifacts_dir=None, dataset_dir=None) -> FastAPI:
    app = FastAPI(title="brainalign", version="0.1.0")
    artifacts_dir = artifacts_dir or os.environ.get(ARTIFACTS_ENV)

    runtime = None
    load_error = "no artifact directory configured"
    if artifacts_dir:
        try:
            runtime = Runtime(artifacts_dir, dataset_dir)
        except Exception as err:  # noqa: BLE001 - surface as 503, service still starts
            load_error = str(err)
    app.state.runtime = runtime

    @app.exception_handler(RequestValidationError)
    async def malformed_body(_request: Request, exc: RequestValidationError):
        return _error(400, "bad_request", str(exc.errors()[:1]))

    def require_runtime():
        if app.state.runtime is None:
            return None
        return app.state.runtime

    @app.get("/health")
    def health():
        return _json_response({"status": "ok"})

    @app.get("/v1/exams")
    def list_exams():
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        exams = [
            {
                "exam_id": e.exam_id,
                "patient_id": e.patient_id,
                "patient_age_years": e.patient_age_years,
                "sequences": sorted(s.value for s in e.sequences),
            }
            for e in rt.exams.values()
        ]
        exams.sort(key=lambda x: x["exam_id"])
        return _json_response({"exams": exams, "count": len(exams)})

    @app.get("/v1/exams/{exam_id}")
    def exam_detail(exam_id: str):
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        try:
            e = rt.exam(exam_id)
        except KeyError:
            return _error(404, "unknown_exam", f"no exam {exam_id!r}")
        return _json_response(
            {
                "exam_id": e.exam_id,
                "patient_id": e.patient_id,
                "patient_age_years": e.patient_age_years,
                "report_id": e.report_id,
                "sequences": sorted(s.value for s in e.sequences),
            }
        )

    @app.post("/v1/score")
    def score(request: ScoreRequest):
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        if not request.queries:
            return _error(400, "bad_request", "queries must be non-empty")
        try:
            payload = rt.score_exam(request.exam_id, request.queries)
        except KeyError:
            return _error(404, "unknown_exam", f"no exam {request.exam_id!r}")
        except InferenceError as err:
            return _error(400, "bad_request", str(err))
        return _json_response(payload)

    @app.post("/v1/retrieve")
    def retrieve(request: RetrieveRequest):
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        seq = None
        if request.sequence is not None:
            try:
                seq = SequenceType(request.sequence)
            except ValueError:
                return _error(400, "bad_request", f"unknown sequence {request.sequence!r}")
        if request.k < 1:
            return _error(400, "bad_request", "k must be >= 1")
        try:
            payload = rt.retrieve(request.query, seq, request.k)
        except InferenceError as err:
            return _error(400, "bad_request", str(err))
        return _json_response(payload)

    @app.post("/v1/saliency")
    def saliency(request: SaliencyRequest):
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        try:
            seq = SequenceType(request.sequence)
        except ValueError:
            return _error(400, "bad_request", f"unknown sequence {request.sequence!r}")
        smooth = None
        if request.smooth_samples:
            smooth = SmoothGradConfig(n_samples=request.smooth_samples,
                                      noise_std=request.noise_std, seed=request.seed)
        out_dir = Path(rt.artifacts) / "saliency"
        stem = f"{request.exam_id}_{seq.value}_saliency.nii.gz"
        try:
            payload = rt.saliency(request.exam_id, seq, request.query, smooth=smooth,
                                  axis=request.axis, save_volume_to=out_dir / stem)
        except KeyError:
            return _error(404, "unknown_exam", f"no exam {request.exam_id!r}")
        except InferenceError as err:
            return _error(400, "bad_request", str(err))
        payload["saliency_volume"] = f"saliency/{stem}"
        return _json_response(payload)

    @app.post("/v1/discrepancy")
    def discrepancy(request: DiscrepancyRequest):
        rt = require_runtime()
        if rt is None:
            return _error(503, "model_not_loaded", load_error)
        try:
            payload = rt.discrepancy(request.exam_id, request.report_text,
                                     request.templates, request.theta_scan,
                                     request.theta_report)
        except KeyError:
            return _error(404, "unknown_exam", f"no exam {request.exam_id!r}")
        except InferenceError as err:
            return _error(400, "bad_request", str(err))
        return _json_response(payload)

    return app
