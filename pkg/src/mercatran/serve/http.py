"""HTTP front end for :class:`RecommendationService`."""
from __future__ import annotations

import os
from typing import Any, List, Optional

from fastapi import FastAPI, Query, Request
from fastapi.responses import JSONResponse
from pydantic import BaseModel, ConfigDict, Field

from ..errors import BadRequest, EmptyHistory, MercatranError, NotReady
from .service import RecommendationService

DEFAULT_PORT = 8080


class ScoredItem(BaseModel):
    model_config = ConfigDict(extra="forbid")

    item_id: str
    score: float
    name: Optional[str] = None
    brand_name: Optional[str] = None
    price: Optional[float] = None


class StepResult(BaseModel):
    model_config = ConfigDict(extra="forbid")

    step: int = Field(ge=1)
    items: List[ScoredItem]


class RecommendResponse(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    steps: List[StepResult]
    model_version: str
    index_version: str
    cache_hit: bool


class SimilarResponse(BaseModel):
    model_config = ConfigDict(extra="forbid", protected_namespaces=())

    item_id: str
    items: List[ScoredItem]
    model_version: str
    index_version: str


class RecommendRequest(BaseModel):
    user_id: Optional[str] = None
    events: Optional[List[dict]] = None
    k: int = 20


class ReindexRequest(BaseModel):
    items_path: str


class HealthResponse(BaseModel):
    model_config = ConfigDict(protected_namespaces=())

    status: str
    model_version: str
    index_version: Optional[str] = None


def _error(status: int, exc: Exception) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": type(exc).__name__, "detail": str(exc)})


def create_app(service: RecommendationService) -> FastAPI:
    app = FastAPI(title="mercatran", version="1")
    app.state.service = service

    @app.exception_handler(NotReady)
    async def _not_ready(request: Request, exc: NotReady):
        return _error(503, exc)

    @app.exception_handler(MercatranError)
    async def _bad(request: Request, exc: MercatranError):
        return _error(400, exc)

    @app.post("/v1/recommendations", response_model=RecommendResponse)
    def recommend(req: RecommendRequest) -> Any:
        if req.k < 1:
            raise BadRequest("k must be >= 1")
        if req.user_id is None and not req.events:
            raise EmptyHistory("provide user_id or events")
        return service.handle_recommend(req.user_id, req.events, req.k)

    @app.get("/v1/items/{item_id}/similar", response_model=SimilarResponse)
    def similar(item_id: str, k: int = Query(20)) -> Any:
        try:
            return service.similar_items(item_id, k)
        except KeyError:
            return JSONResponse(status_code=404, content={"error": "UnknownItem", "detail": item_id})

    @app.post("/admin/reindex")
    def reindex(req: ReindexRequest) -> Any:
        if not os.path.exists(req.items_path):
            raise BadRequest(f"no such file: {req.items_path}")
        return {"index_version": service.reindex(req.items_path)}

    @app.get("/healthz", response_model=HealthResponse)
    def healthz() -> Any:
        return service.health()

    return app


def resolve_port(port: Optional[int] = None) -> int:
    env = os.environ.get("MERCATRAN_PORT")
    if env:
        return int(env)
    return DEFAULT_PORT if port is None else int(port)


def run(service: RecommendationService, host: str = "127.0.0.1", port: Optional[int] = None) -> None:
    import uvicorn

    uvicorn.run(create_app(service), host=host, port=resolve_port(port), log_level="warning")
