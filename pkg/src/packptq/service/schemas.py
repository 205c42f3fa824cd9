"""Pydantic request/response models for the HTTP surface."""

from __future__ import annotations

from pydantic import BaseModel, Field

from ..config import DatasetSpec, RunConfig


class RunRequest(BaseModel):
    config: RunConfig


class AblateRequest(BaseModel):
    config: RunConfig
    grid: list[tuple[str, bool]] | None = None  # (strategy, mixed_precision) cells
    seeds: list[int] | None = None


class GenDataRequest(BaseModel):
    spec: DatasetSpec = Field(default_factory=DatasetSpec)
    out_path: str


class GenModelRequest(BaseModel):
    config: RunConfig
    out_path: str


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorResponse(BaseModel):
    error: str   # "config" | "numerical" | "internal"
    message: str
