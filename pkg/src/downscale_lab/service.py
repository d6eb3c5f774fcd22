"""FastAPI service exposing the pure computational endpoints.

Cost accounting, grid generation, and the scaling analyses are
stateless request/response operations, so they are served over HTTP
with pydantic-validated payloads. Long-running batch work (filtering,
tokenizer training, pre-training) stays on the CLI, which operates on
local files.

Run with: uvicorn downscale_lab.service:app
"""

from __future__ import annotations

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel, Field

from . import analysis, costmodel, grid as grid_mod
from .config import ModelConfig

app = FastAPI(title="downscale-lab", version="0.1.0")


class ConfigPayload(BaseModel):
    embedding_size: int
    hidden_size: int
    intermediate_size: int
    num_layers: int
    num_heads: int
    vocab_size: int = 19000
    max_seq_len: int = 128
    num_positions: int = 512
    dropout: float = 0.10

    def build(self) -> ModelConfig:
        try:
            return ModelConfig.from_dict(self.model_dump())
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))


class ParamCountResponse(BaseModel):
    param_count: int


class FlopsRequest(BaseModel):
    config: ConfigPayload
    mode: str = "s_corrected"
    updates: int | None = None
    batch: int | None = None


class FlopsResponse(BaseModel):
    c_emb: float
    c_att: float
    c_int: float
    c_lmh: float
    c_forward: float
    c_backward: float
    c_seq: float
    mode: str
    total_flops: float | None = None


class GridRequest(BaseModel):
    anchor: ConfigPayload
    axes: dict[str, list[int]] | None = None
    mode: str = "unidirectional"
    sample_count: int = 16
    seed: int = 0


class GridResponse(BaseModel):
    configs: list[ConfigPayload]


class PointsRequest(BaseModel):
    points: list[tuple[float, float]] = Field(min_length=3)
    log_space: bool = False


class FitResponse(BaseModel):
    c: float
    e: float
    r2: float
    n: int
    domain: tuple[float, float]
    converged: bool


class BreakRequest(BaseModel):
    points: list[tuple[float, float]] = Field(min_length=6)
    candidates: list[float] | None = None
    min_exponent_gap: float = 0.02


class BreakResponse(BaseModel):
    threshold: float
    fit_low: FitResponse
    fit_high: FitResponse
    combined_r2: float
    is_break: bool


class FrontierRecord(BaseModel):
    run_id: str
    step: int
    flops: float
    loss: float
    model_size: float = 0.0
    tokens_seen: float = 0.0


class FrontierRequest(BaseModel):
    records: list[FrontierRecord] = Field(min_length=1)
    n_bins: int = 32


class FrontierPointResponse(BaseModel):
    bin_lo: float
    bin_hi: float
    flops: float
    loss: float
    run_id: str
    step: int
    model_size: float
    tokens_seen: float


class IcerRung(BaseModel):
    config: ConfigPayload
    perplexity: float
    flops: float


class IcerEntryResponse(BaseModel):
    from_shape: tuple[int, int, int, int, int]
    to_shape: tuple[int, int, int, int, int]
    delta_perplexity: float
    delta_flops: float
    icer: float
    icer_per_1e15: float


class SpearmanRequest(BaseModel):
    x: list[float] = Field(min_length=3)
    y: list[float] = Field(min_length=3)


class SpearmanResponse(BaseModel):
    rho: float
    p_value: float
    n: int


@app.get("/health")
def health() -> dict:
    return {"status": "ok"}


@app.post("/cost/params", response_model=ParamCountResponse)
def cost_params(config: ConfigPayload):
    return {"param_count": costmodel.count_params(config.build())}


@app.post("/cost/flops", response_model=FlopsResponse)
def cost_flops(req: FlopsRequest):
    try:
        bd = costmodel.flops_per_sequence(req.config.build(), mode=req.mode)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    payload = bd.to_dict()
    if req.updates is not None and req.batch is not None:
        payload["total_flops"] = costmodel.total_flops(
            bd.c_seq, req.updates, req.batch)
    return payload


@app.post("/grid", response_model=GridResponse)
def generate_grid(req: GridRequest):
    try:
        spec = grid_mod.GridSpec(
            anchor=req.anchor.build(),
            axes=req.axes if req.axes is not None else dict(grid_mod.DEFAULT_AXES),
            mode=req.mode, sample_count=req.sample_count, seed=req.seed)
        configs = grid_mod.generate_grid(spec)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return {"configs": [c.to_dict() for c in configs]}


@app.post("/analysis/fit", response_model=FitResponse)
def fit(req: PointsRequest):
    try:
        return analysis.fit_power_law(req.points,
                                      log_space=req.log_space).to_dict()
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))


@app.post("/analysis/break", response_model=BreakResponse)
def detect_break(req: BreakRequest):
    cands = req.candidates
    if cands is None:
        cands = sorted(p[0] for p in req.points)
    try:
        rep = analysis.detect_break(req.points, cands,
                                    min_exponent_gap=req.min_exponent_gap)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return rep.to_dict()


@app.post("/analysis/frontier",
          response_model=list[FrontierPointResponse])
def frontier(req: FrontierRequest):
    # inline records are wrapped as one synthetic run per run_id
    from .trainer import RunLog, OptimizerHyper
    by_run: dict[str, list[FrontierRecord]] = {}
    for r in req.records:
        by_run.setdefault(r.run_id, []).append(r)
    runs = []
    stub_cfg = ModelConfig(32, 32, 64, 1, 1)
    for run_id, recs in by_run.items():
        log = RunLog(config=stub_cfg, hyper=OptimizerHyper(), seed=0,
                     run_id=run_id)
        for r in sorted(recs, key=lambda r: r.step):
            log.records.append((r.step, int(r.tokens_seen), r.flops, r.loss,
                                r.loss, 0.0))
        runs.append((log, {rec.step: rec for rec in recs}))
    try:
        points = analysis.compute_optimal_frontier([r for r, _ in runs],
                                                   n_bins=req.n_bins)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    lookup = {run.run_id: recs for run, recs in runs}
    out = []
    for p in points:
        rec = lookup[p.source[0]][p.source[1]]
        out.append(FrontierPointResponse(
            bin_lo=p.flops_bin[0], bin_hi=p.flops_bin[1], flops=p.flops,
            loss=p.loss, run_id=p.source[0], step=p.source[1],
            model_size=rec.model_size, tokens_seen=rec.tokens_seen))
    return out


@app.post("/analysis/icer", response_model=list[IcerEntryResponse])
def icer(ladder: list[IcerRung]):
    try:
        entries = analysis.icer([(r.config.build(), r.perplexity, r.flops)
                                 for r in ladder])
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return [IcerEntryResponse(
        from_shape=e.from_config.shape, to_shape=e.to_config.shape,
        delta_perplexity=e.delta_perplexity, delta_flops=e.delta_flops,
        icer=e.icer, icer_per_1e15=e.icer_per_1e15) for e in entries]


@app.post("/analysis/spearman", response_model=SpearmanResponse)
def spearman(req: SpearmanRequest):
    try:
        rho, p = analysis.spearman(req.x, req.y)
    except ValueError as exc:
        raise HTTPException(status_code=422, detail=str(exc))
    return {"rho": rho, "p_value": p, "n": len(req.x)}
