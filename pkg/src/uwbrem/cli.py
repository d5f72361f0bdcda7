"""Operator command line: dataset conversion, training, the accuracy/size
pipeline, quantization, embedded export, benchmarking and plot-data emission.

Every command writes one JSON object per line (stdout and, with --out, a
.jsonl file) and persists its resolved run configuration so a run can be
reproduced exactly.
"""

from __future__ import annotations

import json
from pathlib import Path

import click
import numpy as np

from . import dataset, engine, quant, synth
from .graph import optimize, remnet_to_graph
from .model import ModelConfig, param_count
from .train import (
    TrainConfig,
    aggregate_seed_metrics,
    boxplot_record,
    cir_grid_study,
    evaluate,
    residuals,
    train_one,
)

DEFAULT_GRID = (157, 128, 64, 32, 16)


class Emitter:
    """Line-oriented JSON record sink: stdout plus an optional file."""

    def __init__(self, out_dir: str | None, filename: str, quiet: bool = False):
        self._fh = None
        self._quiet = quiet
        if out_dir is not None:
            path = Path(out_dir)
            path.mkdir(parents=True, exist_ok=True)
            self._fh = open(path / filename, "w")

    def emit(self, record: dict) -> None:
        line = json.dumps(record, sort_keys=True)
        if not self._quiet:
            click.echo(line)
        if self._fh:
            self._fh.write(line + "\n")

    def close(self) -> None:
        if self._fh:
            self._fh.close()


def _persist_runconfig(out: str | None, command: str, params: dict) -> None:
    if out is None:
        return
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    record = {"command": command, **{k: v for k, v in params.items() if v is not None}}
    (path / "runconfig.json").write_text(json.dumps(record, sort_keys=True, indent=2))


def _load_split(dataset_path: str) -> dataset.Split:
    if not Path(dataset_path).exists():
        raise click.ClickException(f"dataset not found: {dataset_path}")
    samples, report = dataset.ingest(dataset_path)
    if report.n_rejected:
        click.echo(f"# ingest: rejected {report.n_rejected} rows", err=True)
    return dataset.split(samples)


def _train_config(epochs, batch_size, lr, seeds) -> TrainConfig:
    return TrainConfig(epochs=epochs, batch_size=batch_size, lr=lr,
                       seeds=tuple(range(seeds)))


@click.group()
def main():
    """UWB range-error mitigation toolkit."""


@main.command()
@click.option("--seed", default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(),
              help="Output CSV path for the generated corpus.")
def synthesize(seed, out):
    """Generate the synthetic multi-room corpus in canonical CSV form."""
    samples = synth.generate(seed=seed)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    dataset.write_canonical(samples, out)
    med = samples.subset(samples.environment == dataset.TEST_ENV)
    stats = dataset.summary_stats(med)
    emitter = Emitter(None, "")
    emitter.emit({"record": "synthesize", "seed": seed, "path": out,
                  "n_samples": len(samples), "test_env_mae_m": stats.mae_m,
                  "test_env_sigma_m": stats.sigma_m})


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
def convert(dataset_path, out):
    """Validate a raw CSV and rewrite it in canonical column order."""
    if not Path(dataset_path).exists():
        raise click.ClickException(f"dataset not found: {dataset_path}")
    samples, report = dataset.ingest(dataset_path)
    out_dir = str(Path(out))
    _persist_runconfig(out_dir, "convert", {"dataset": dataset_path})
    dataset.write_canonical(samples, str(Path(out_dir) / "canonical.csv"))
    emitter = Emitter(out_dir, "convert.jsonl")
    emitter.emit({"record": "convert", "n_accepted": report.n_accepted,
                  "n_rejected": report.n_rejected,
                  "rejected": [{"line": ln, "reason": why} for ln, why in report.rejected[:50]]})
    emitter.close()


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--cir-len", default=dataset.CIR_LEN, show_default=True, type=int)
@click.option("--seeds", default=5, show_default=True, type=int,
              help="Number of seeds (0..n-1); one weight file each.")
@click.option("--paper-counts", is_flag=True,
              help="Parameter-count-compatible architecture variant.")
@click.option("--epochs", default=30, show_default=True, type=int)
@click.option("--batch-size", default=32, show_default=True, type=int)
@click.option("--lr", default=3e-4, show_default=True, type=float)
@click.option("--dropout", default=0.2, show_default=True, type=float)
@click.option("--out", required=True, type=click.Path())
def train(dataset_path, cir_len, seeds, paper_counts, epochs, batch_size, lr,
          dropout, out):
    """Train the residual CNN; persists one checkpoint per seed plus metrics."""
    _persist_runconfig(out, "train", {
        "dataset": dataset_path, "cir_len": cir_len, "seeds": seeds,
        "paper_counts": paper_counts, "epochs": epochs,
        "batch_size": batch_size, "lr": lr, "dropout": dropout,
    })
    split = _load_split(dataset_path)
    tc = _train_config(epochs, batch_size, lr, seeds)
    emitter = Emitter(out, "train.jsonl")
    per_seed = []
    from .train import train as run_train
    from .model import build_remnet
    for seed in tc.seeds:
        cfg = ModelConfig(K=cir_len, dropout_rate=dropout,
                          paper_count_compatible=paper_counts)
        weights = build_remnet(cfg, seed=seed)
        x = dataset.prepare(split.train.cir, cir_len)
        state = {}
        history = run_train(weights, x, split.train.range_error, tc, seed=seed,
                            state_out=state)
        image = engine.serialize_float(remnet_to_graph(weights),
                                       kind=engine.KIND_CHECKPOINT,
                                       adam=state["adam"])
        ckpt = Path(out) / f"seed{seed}.urm"
        ckpt.write_bytes(image)
        metrics = evaluate(weights, split.test, cir_len)
        per_seed.append(metrics)
        emitter.emit({"record": "seed", "seed": seed, "K": cir_len,
                      "checkpoint": str(ckpt), "final_train_loss": history[-1],
                      **metrics.to_dict()})
    emitter.emit({"record": "aggregate", "K": cir_len, "n_seeds": seeds,
                  **aggregate_seed_metrics(per_seed)})
    emitter.close()


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--cir-len", "cir_lens", multiple=True, type=int,
              help="K values to sweep; default full grid.")
@click.option("--seeds", default=1, show_default=True, type=int)
@click.option("--paper-counts", is_flag=True)
@click.option("--epochs", default=30, show_default=True, type=int)
@click.option("--out", required=True, type=click.Path())
def pipeline(dataset_path, cir_lens, seeds, paper_counts, epochs, out):
    """Full reproduction table: per-K params, float/optimized/int8 MAE and
    the three image sizes; also persists residuals for box-plot analysis."""
    Ks = tuple(cir_lens) or DEFAULT_GRID
    _persist_runconfig(out, "pipeline", {
        "dataset": dataset_path, "cir_lens": list(Ks), "seeds": seeds,
        "paper_counts": paper_counts, "epochs": epochs,
    })
    split = _load_split(dataset_path)
    tc = _train_config(epochs, 32, 3e-4, seeds)
    emitter = Emitter(out, "pipeline.jsonl")
    resid_emitter = Emitter(out, "residuals.jsonl")
    x_cal = None
    for K in Ks:
        try:
            cfg = ModelConfig(K=K, paper_count_compatible=paper_counts)
            maes, maes_go, maes_int8 = [], [], []
            sizes = None
            for seed in tc.seeds:
                weights, _ = train_one(split, K, tc, seed, cfg)
                g = remnet_to_graph(weights)
                go = optimize(g)
                x_cal = dataset.prepare(split.train.cir, K)[:1024]
                ranges = quant.calibrate(go, x_cal)
                qm = quant.quantize_model(go, ranges)
                maes.append(evaluate(weights, split.test, K).mae_m)
                maes_go.append(evaluate(go, split.test, K).mae_m)
                maes_int8.append(evaluate(qm, split.test, K).mae_m)
                sizes = {
                    "float_image_bytes": len(engine.serialize_float(g, engine.KIND_CHECKPOINT)),
                    "optimized_image_bytes": len(engine.serialize_float(go)),
                    "int8_image_bytes": len(engine.serialize(qm)),
                }
                resid_emitter.emit({"record": "boxplot", "K": K, "seed": seed,
                                    **boxplot_record(np.abs(residuals(qm, split.test, K)))})
            emitter.emit({
                "record": "pipeline_row", "K": K, "params": param_count(cfg),
                "mae_m": float(np.mean(maes)), "mae_go_m": float(np.mean(maes_go)),
                "mae_int8_m": float(np.mean(maes_int8)), **sizes,
            })
        except Exception as exc:
            emitter.emit({"record": "pipeline_row", "K": K, "error": str(exc)})
    emitter.close()
    resid_emitter.close()


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--dataset", "dataset_path", required=True, type=click.Path(),
              help="Canonical CSV used only for range calibration.")
@click.option("--out", required=True, type=click.Path())
def quantize(model_path, dataset_path, out):
    """Float checkpoint -> optimized graph -> calibrated int8 image."""
    if not Path(model_path).exists():
        raise click.ClickException(f"model not found: {model_path}")
    _persist_runconfig(out, "quantize", {"model": model_path, "dataset": dataset_path})
    graph = engine.deserialize(Path(model_path).read_bytes())
    if isinstance(graph, quant.QuantizedModel):
        raise click.ClickException("model is already quantized")
    split = _load_split(dataset_path)
    go = optimize(graph)
    K = graph.input_len
    x_cal = dataset.prepare(split.train.cir, K)[:1024]
    qm = quant.quantize_model(go, quant.calibrate(go, x_cal))
    image = engine.serialize(qm)
    out_path = Path(out) / "model_int8.urm"
    out_path.write_bytes(image)
    plan = engine.plan_memory(qm)
    emitter = Emitter(out, "quantize.jsonl")
    emitter.emit({
        "record": "quantize", "path": str(out_path), "K": K,
        "int8_image_bytes": len(image), "arena_bytes": plan.arena_size,
        "input_scale": qm.input_qp.scale, "input_zero_point": qm.input_qp.zero_point,
        "output_scale": qm.output_qp.scale, "output_zero_point": qm.output_qp.zero_point,
        "mae_int8_m": evaluate(qm, split.test, K).mae_m,
    })
    emitter.close()


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--prefix", default="uwbrem", show_default=True)
@click.option("--out", required=True, type=click.Path())
def export(model_path, prefix, out):
    """Int8 image -> C source file embedding the model bytes."""
    if not Path(model_path).exists():
        raise click.ClickException(f"model not found: {model_path}")
    _persist_runconfig(out, "export", {"model": model_path, "prefix": prefix})
    qm = engine.deserialize(Path(model_path).read_bytes())
    if not isinstance(qm, quant.QuantizedModel):
        raise click.ClickException("export requires an int8 model image")
    text = engine.emit_embedded_source(qm, prefix)
    src = Path(out) / f"{prefix}_model.c"
    src.write_text(text)
    emitter = Emitter(out, "export.jsonl")
    emitter.emit({"record": "export", "source": str(src),
                  "symbol": f"{prefix}_model", "bytes": len(text)})
    emitter.close()


@main.command()
@click.option("--model", "model_paths", required=True, multiple=True,
              type=click.Path(), help="Int8 model image(s); one row each.")
@click.option("--runs", default=100, show_default=True, type=int)
@click.option("--vcc", default=None, type=float, help="Supply voltage, volts.")
@click.option("--iabs", default=None, type=float, help="Absorbed current, mA.")
@click.option("--out", default=None, type=click.Path())
def bench(model_paths, runs, vcc, iabs, out):
    """Host latency per model; energy per inference when --vcc/--iabs given.

    Host numbers are not comparable to microcontroller figures; only the
    trend across CIR lengths is meaningful.
    """
    if runs < 30:
        raise click.ClickException("--runs must be at least 30")
    _persist_runconfig(out, "bench", {"models": list(model_paths), "runs": runs,
                                      "vcc": vcc, "iabs": iabs})
    emitter = Emitter(out, "bench.jsonl")
    for path in model_paths:
        if not Path(path).exists():
            raise click.ClickException(f"model not found: {path}")
        qm = engine.deserialize(Path(path).read_bytes())
        if not isinstance(qm, quant.QuantizedModel):
            raise click.ClickException(f"not an int8 model image: {path}")
        stats = engine.measure_latency(qm, runs=runs)
        record = {"record": "bench", "model": path, "K": qm.input_len, **stats}
        if vcc is not None and iabs is not None:
            p_mw = vcc * iabs
            record["p_abs_mw"] = p_mw
            record["e_inf_mj"] = engine.energy_per_inference(p_mw, stats["f_m_hz"])
        emitter.emit(record)
    emitter.close()


@main.command()
@click.option("--dataset", "dataset_path", required=True, type=click.Path())
@click.option("--residuals", "residuals_path", default=None, type=click.Path(),
              help="residuals.jsonl from `pipeline` for per-K box plots.")
@click.option("--out", required=True, type=click.Path())
def analyze(dataset_path, residuals_path, out):
    """Dataset structure: 3-D PCA projections with labels, environment
    separation score, and (optionally) per-K residual box-plot data."""
    _persist_runconfig(out, "analyze", {"dataset": dataset_path,
                                        "residuals": residuals_path})
    if not Path(dataset_path).exists():
        raise click.ClickException(f"dataset not found: {dataset_path}")
    samples, _ = dataset.ingest(dataset_path)
    if len(samples) == 0:
        raise click.ClickException("empty dataset")
    _, proj, ratios = dataset.pca3(dataset.prepare(samples.cir, dataset.CIR_LEN))
    emitter = Emitter(out, "analyze.jsonl")
    emitter.emit({"record": "pca_summary", "n_samples": len(samples),
                  "explained_variance_ratios": [float(r) for r in ratios]})
    indoor = np.isin(samples.environment, ("big_room", "medium_room", "small_room"))
    wall = samples.environment == "through_wall"
    if indoor.any() and wall.any():
        sel = np.flatnonzero(indoor | wall)
        if len(sel) > 800:  # silhouette is O(n^2); a fixed subsample suffices
            sel = np.random.default_rng(0).choice(sel, 800, replace=False)
        score = silhouette(proj[sel], wall[sel].astype(int))
        emitter.emit({"record": "separation", "groups": ["indoor", "through_wall"],
                      "silhouette": score})
    proj_emitter = Emitter(out, "projections.jsonl", quiet=True)
    for i in range(len(samples)):
        proj_emitter.emit({"record": "projection",
                           "p": [float(v) for v in proj[i]],
                           "environment": str(samples.environment[i]),
                           "material": str(samples.material[i]),
                           "los": bool(samples.los[i])})
    proj_emitter.close()
    if residuals_path is not None:
        for line in Path(residuals_path).read_text().splitlines():
            rec = json.loads(line)
            keys = ("min", "q1", "median", "q3", "max")
            emitter.emit({"record": "boxplot", "K": rec["K"],
                          **{k: rec[k] for k in keys if k in rec}})
    emitter.close()


def silhouette(points: np.ndarray, labels: np.ndarray) -> float:
    """Mean silhouette score for a two-group labelling (0/1)."""
    d = np.linalg.norm(points[:, None, :] - points[None, :, :], axis=2)
    same = labels[:, None] == labels[None, :]
    n = len(points)
    scores = np.empty(n)
    for i in range(n):
        within = d[i, same[i] & (np.arange(n) != i)]
        between = d[i, ~same[i]]
        a, b = within.mean(), between.mean()
        scores[i] = (b - a) / max(a, b)
    return float(scores.mean())


if __name__ == "__main__":
    main()
