"""FastAPI service wrapping the quantization pipeline.

Error contract: bad usage (unknown files, invalid configs, schema violations)
returns 400 with {"error": "config"}; numerical failures return 500 with
{"error": "numerical"}. The CLI maps these to exit codes 2 and 3.
"""

from __future__ import annotations

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .. import __version__, pipeline
from ..errors import ConfigError, NumericalError
from ..nets import ARCH_PATTERNS
from .schemas import (AblateRequest, GenDataRequest, GenModelRequest, HealthResponse,
                      RunRequest)


def create_app() -> FastAPI:
    app = FastAPI(title="packptq", version=__version__)

    @app.exception_handler(ConfigError)
    async def config_error(request: Request, exc: ConfigError):
        return JSONResponse(status_code=400, content={"error": "config", "message": str(exc)})

    @app.exception_handler(NumericalError)
    async def numerical_error(request: Request, exc: NumericalError):
        return JSONResponse(status_code=500, content={"error": "numerical", "message": str(exc)})

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(status="ok", version=__version__)

    @app.get("/architectures")
    def architectures():
        return {"patterns": list(ARCH_PATTERNS)}

    @app.post("/run/score")
    def run_score(req: RunRequest):
        return pipeline.cmd_score(req.config)

    @app.post("/run/pack")
    def run_pack(req: RunRequest):
        return pipeline.cmd_pack(req.config)

    @app.post("/run/allocate")
    def run_allocate(req: RunRequest):
        return pipeline.cmd_allocate(req.config)

    @app.post("/run/quantize")
    def run_quantize(req: RunRequest):
        return pipeline.cmd_quantize(req.config)

    @app.post("/run/reconstruct")
    def run_reconstruct(req: RunRequest):
        return pipeline.cmd_reconstruct(req.config)

    @app.post("/run/eval")
    def run_eval(req: RunRequest):
        return pipeline.cmd_eval(req.config)

    @app.post("/run/pipeline")
    def run_full(req: RunRequest):
        return pipeline.run_pipeline(req.config)

    @app.post("/run/ablate")
    def run_ablate(req: AblateRequest):
        return pipeline.run_ablation(req.config, req.grid, req.seeds)

    @app.post("/datasets/generate")
    def gen_data(req: GenDataRequest):
        return pipeline.cmd_gen_data(req.spec, req.out_path)

    @app.post("/models/build")
    def gen_model(req: GenModelRequest):
        return pipeline.cmd_gen_model(req.config, req.out_path)

    return app


app = create_app()
