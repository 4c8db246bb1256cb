"""Experiment harness: base pretraining, run setup, mode presets, and
run-directory artifacts (config snapshot, metrics, losses, checkpoints).
"""

from __future__ import annotations

import copy
import csv
import json
import os
import numpy as np

from . import config as cfgmod
from . import continual, descriptions, encoder, metrics

MODES = ("leaf", "baseline-single-lora", "mole-token")

COMPONENT_LADDER = ("baseline", "+experts", "+distill", "+labels")


def apply_mode(resolved: dict, mode: str) -> dict:
    """Comparison-mode presets over a resolved config (returns a copy).

    The full system trains on current data plus memory plus augmented
    memory copies, so `leaf` switches augmentation on; the comparison
    modes keep whatever the config says (default: off).
    """
    out = copy.deepcopy(resolved)
    if mode == "leaf":
        out["continual"]["augment"] = True
        return out
    if mode == "baseline-single-lora":
        out["moe"]["num_experts"] = 1
        out["moe"]["topk"] = 1
        for key in ("alpha_router", "alpha_label", "alpha_fd", "alpha_pd"):
            out["losses"][key] = 0.0
        return out
    if mode == "mole-token":
        out["moe"]["routing"] = "token"
        for key in ("alpha_label", "alpha_fd", "alpha_pd"):
            out["losses"][key] = 0.0
        return out
    raise ValueError(f"unknown mode {mode!r}")


def apply_ladder_step(resolved: dict, step: str) -> dict:
    """Component ablation ladder: baseline -> +experts -> +distill -> +labels.

    The baseline row is the plain single-adapter system. Every other row
    is the full system with the not-yet-added components switched off, so
    the framework's augmented-memory training set is present from the
    +experts row on and the last row equals the `leaf` mode.
    """
    if step == "baseline":
        return apply_mode(resolved, "baseline-single-lora")
    out = apply_mode(resolved, "leaf")
    if step == "+experts":
        for key in ("alpha_fd", "alpha_pd", "alpha_label"):
            out["losses"][key] = 0.0
        return out
    if step == "+distill":
        out["losses"]["alpha_label"] = 0.0
        return out
    if step == "+labels":
        return out
    raise ValueError(f"unknown ladder step {step!r}")


def pick_base_labels(dataset, n_base: int, seed: int) -> list[str]:
    rng = np.random.default_rng(seed)
    names = list(dataset.label_names)
    if n_base >= len(names):
        raise ValueError(f"n_base_labels {n_base} >= total labels {len(names)}")
    picks = rng.choice(len(names), size=n_base, replace=False)
    return sorted(names[i] for i in picks)


def pretrain_base(dataset, resolved: dict, seed: int):
    """Phase 1: train the encoder on held-out base labels, then freeze.

    Returns (weights, vocab, base_label_names).
    """
    from .data_synth import build_vocab_tokens

    vocab = encoder.Vocab(build_vocab_tokens(dataset))
    base_names = pick_base_labels(dataset, resolved["run"]["n_base_labels"], seed)
    name_to_id = {n: i for i, n in enumerate(dataset.label_names)}
    pairs = []
    for local, name in enumerate(base_names):
        for text in dataset.train[name_to_id[name]]:
            pairs.append((text, local))
    cfg = cfgmod.encoder_config(resolved, vocab_size=len(vocab))
    rng = np.random.default_rng(seed)
    weights = encoder.train_base_task(pairs, cfg, vocab, rng,
                                      epochs=resolved["run"]["base_epochs"],
                                      lr=resolved["run"]["base_lr"])
    return weights, vocab, base_names


def setup_run(dataset, desc_raw, weights, vocab, base_names, resolved, seed):
    """Build the stream, description bank, and fresh model state for one run."""
    name_to_id = {n: i for i, n in enumerate(dataset.label_names)}
    stream_labels = [name_to_id[n] for n in dataset.label_names if n not in set(base_names)]
    cont = resolved["continual"]
    stream = continual.build_stream(dataset, cont["n_way"], cont["k_shot"],
                                    cont["num_tasks"], seed, labels=stream_labels)
    bank = descriptions.encode_bank(desc_raw, weights, vocab, name_to_id)
    bank = descriptions.subset_bank(bank, cont["n_descriptions"], seed)
    tc = cfgmod.train_config(resolved, seed=seed)
    state = continual.init_state(weights, vocab, bank, tc)
    return stream, state


def run_once(dataset, desc_raw, weights, vocab, base_names, resolved, seed,
             out_dir=None) -> metrics.MetricMatrix:
    """One full continual run; optionally writes the run directory."""
    stream, state = setup_run(dataset, desc_raw, weights, vocab, base_names,
                              resolved, seed)
    after_task = None
    if out_dir is not None:
        ckpt_dir = os.path.join(out_dir, "checkpoints")
        os.makedirs(ckpt_dir, exist_ok=True)

        def after_task(t, st):
            _save_checkpoint(st, os.path.join(ckpt_dir, f"task_{t + 1}.bin"))

    matrix = continual.run_experiment(stream, state, after_task=after_task)
    if out_dir is not None:
        write_run_dir(out_dir, resolved, seed, matrix, state)
    return matrix


def _atomic_write(path, text: str) -> None:
    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_run_dir(out_dir, resolved, seed, matrix: metrics.MetricMatrix,
                  state: continual.ModelState | None = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    snap = copy.deepcopy(resolved)
    snap["run"]["seed"] = seed
    cfgmod.write_snapshot(snap, os.path.join(out_dir, "config.snapshot.json"))

    per_task, mean_forget = metrics.forgetting(matrix)
    payload = {
        "seed": seed,
        "matrix": matrix.to_dict(),
        "forgetting_per_task": per_task,
        "forgetting_mean": mean_forget,
        "final_cumulative_micro": matrix.final_cumulative_micro(),
    }
    _atomic_write(os.path.join(out_dir, "metrics.json"),
                  json.dumps(payload, sort_keys=True, indent=2) + "\n")

    T_ = matrix.num_tasks
    lines = ["after_task," + ",".join(f"task_{i + 1}" for i in range(T_)) + ",cumulative_micro"]
    for t in range(T_):
        cells = []
        for i in range(T_):
            v = matrix.micro[t, i]
            cells.append("" if np.isnan(v) else f"{v:.6f}")
        lines.append(f"{t + 1}," + ",".join(cells) + f",{matrix.cumulative_micro[t]:.6f}")
    _atomic_write(os.path.join(out_dir, "metrics_matrix.csv"), "\n".join(lines) + "\n")

    if state is not None:
        header = "step,task,epoch,ce,router,label,fd,pd,total"
        rows = [header]
        for r in state.loss_rows:
            rows.append(f"{r['step']},{r['task']},{r['epoch']},"
                        f"{r['ce']:.10g},{r['router']:.10g},{r['label']:.10g},"
                        f"{r['fd']:.10g},{r['pd']:.10g},{r['total']:.10g}")
        _atomic_write(os.path.join(out_dir, "losses.csv"), "\n".join(rows) + "\n")


def _save_checkpoint(state: continual.ModelState, path) -> None:
    tensors = {}
    for key in sorted(state.pools):
        pool = state.pools[key]
        base = f"pool/{key[0]}.{key[1]}"
        tensors[f"{base}/routing"] = pool.routing.data
        for m, e in enumerate(pool.experts):
            tensors[f"{base}/expert{m}.A"] = e.A.data
            tensors[f"{base}/expert{m}.B"] = e.B.data
    tensors["head/weight"] = state.head.weight.data
    tensors["head/bias"] = state.head.bias.data
    encoder.save_tensors(tensors, path, meta={"class_order": state.head.class_order})


def load_run_metrics(run_dir) -> dict:
    with open(os.path.join(run_dir, "metrics.json"), encoding="utf-8") as fh:
        return json.load(fh)


def write_grid_csv(path, rows: list[dict], num_tasks: int) -> None:
    """Long-form sweep results: one row per (setting, seed)."""
    fields = ["setting", "seed"] + [f"task_{i + 1}" for i in range(num_tasks)] + \
             ["cumulative_micro", "forgetting_mean"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def write_summary_csv(path, by_setting: dict[str, list[metrics.MetricMatrix]],
                      num_tasks: int) -> None:
    """Table-shaped summary: one row per setting, mean±std per task column."""
    fields = ["setting"] + [f"task_{i + 1}" for i in range(num_tasks)] + ["cumulative_micro"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for setting, mats in by_setting.items():
            agg = metrics.aggregate_runs(mats)
            row = {"setting": setting}
            T_ = num_tasks
            for i in range(T_):
                row[f"task_{i + 1}"] = metrics.format_cell(
                    float(agg.mean_micro[T_ - 1, i]), float(agg.std_micro[T_ - 1, i]))
            row["cumulative_micro"] = metrics.format_cell(
                float(agg.mean_cumulative[-1]), float(agg.std_cumulative[-1]))
            writer.writerow(row)
