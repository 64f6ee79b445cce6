"""Run the desk-scale experiments and write their results as TSV files.

    python scripts/run_experiments.py all --out results --cache results/cache
    python scripts/run_experiments.py ladder --out results

Each experiment prints a short table and writes ``<out>/<name>.tsv``.
"""

from __future__ import annotations

import argparse
import time
from pathlib import Path

from matrix_vdu import experiments as ex

EXPERIMENTS = ("convergence", "ladder", "variants", "resolution", "collapse")


def _write(out: Path, name: str, header: list[str], rows: list[list]) -> None:
    text = "\t".join(header) + "\n" + "".join("\t".join(map(str, r)) + "\n" for r in rows)
    (out / f"{name}.tsv").write_text(text, encoding="utf-8")
    print(f"== {name}")
    print(text, end="")


def _per_seed(result: dict[str, list[float]]) -> list[list]:
    return [[k, *(f"{v:.4f}" for v in vals), f"{ex.median(vals):.4f}"] for k, vals in result.items()]


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("which", choices=EXPERIMENTS + ("all",))
    p.add_argument("--out", default="results")
    p.add_argument("--cache", help="reuse pre-training runs stored here")
    a = p.parse_args(argv)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    todo = EXPERIMENTS if a.which == "all" else (a.which,)
    seed_cols = [f"seed{s}" for s in ex.SEEDS] + ["median"]

    needs_pretrain = set(todo) & {"convergence", "ladder", "variants", "resolution"}
    split = ex.entity_split()
    if needs_pretrain:
        t0 = time.perf_counter()
        docs = ex.pretrain_docs()
        run = ex.run_pretraining(ex.DESK, docs, a.cache)
        print(f"pre-training: {len(docs)} pages, {len(run.rows)} steps, {time.perf_counter() - t0:.0f} s")
        ck = run.checkpoint

    if "convergence" in todo:
        c = ex.convergence(run, split.held_out)
        rows = [[k, f"{c.start[k]:.5f}", f"{c.end[k]:.5f}", c.decreased()[k]] for k in c.start]
        rows.append(["ltr_vs_best_constant", f"{c.ltr_constant:.5f}", f"{c.ltr_model:.5f}", c.ltr_model < c.ltr_constant])
        _write(out, "convergence", ["loss", "end_of_warmup", "final", "decreased"], rows)
        print(f"combined loss drop: {100 * c.total_drop:.1f}%")
    if "ladder" in todo:
        res = ex.modality_ladder(ck, split)
        _write(out, "ladder", ["rung"] + seed_cols, _per_seed(res))
        for name, gain in ex.ladder_increments({k: ex.median(v) for k, v in res.items()}):
            print(f"  {name}: {100 * gain:+.2f} F1")
    if "variants" in todo:
        _write(out, "variants", ["variant"] + seed_cols, _per_seed(ex.variant_ablation(ck, split)))
    if "resolution" in todo:
        pts = ex.resolution_sweep(ck, split)
        _write(out, "resolution", ["side", "max_visual_tokens", "observed_max", "f1"],
               [[q.side, q.max_visual_tokens, q.observed_visual_tokens, f"{q.f1:.4f}"] for q in pts])
    if "collapse" in todo:
        traces = ex.collapse_study(ex.COLLAPSE, ex.pretrain_docs(ex.COLLAPSE_DOCS))
        _write(out, "collapse", ["tasks", "initial_norm", "final_norm", "ratio"],
               [["+".join(t.tasks), f"{t.norms[0]:.5f}", f"{t.norms[-1]:.5f}", f"{t.ratio:.4f}"] for t in traces])


if __name__ == "__main__":
    main()
