"""Train the committed experiment artifacts (bases + adapters) under assets/.

Stages are resumable: a stage is skipped when its output file already exists.
Run everything:            python3 scripts/run_experiments.py
Run selected stages:       python3 scripts/run_experiments.py base-a ufo-a-d4
"""

import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from ufolab.adapter import attach, init_adapter, load_adapter, save_adapter
from ufolab.diffusion import sample
from ufolab.model import ModelConfig, build_model, load_model, save_model
from ufolab.synthdata import clip_stream
from ufolab.train import TrainConfig, train_base, train_ufo_consistency, train_ufo_style

ASSETS = Path(__file__).resolve().parents[1] / "assets"
T0 = time.time()

BASE_STEPS = 6000
ADAPTER_STEPS = 3000       # adapter budget used across all adapter stages
ADAPTER_LR = 2e-3          # small parameter set takes a hotter peak than the base
EVAL_EVERY = 1500

EVAL_CONDS = np.arange(16) % 36
EVAL_SEEDS = np.arange(16) + 900


def log(msg):
    print(f"[{time.time() - T0:7.0f}s] {msg}", flush=True)


def interframe(model, stack=None, steps=100):
    vids = sample(model, EVAL_CONDS, EVAL_SEEDS, stack=stack, steps=steps)
    return float(np.mean(np.abs(np.diff(vids, axis=1))))


def train_base_staged(seed, stream_seed, out):
    """Train in EVAL_EVERY chunks so the interframe trend is visible."""
    model = build_model(ModelConfig(), seed=seed)
    data = clip_stream(8, seed=stream_seed)
    done = 0
    while done < BASE_STEPS:
        chunk = min(EVAL_EVERY, BASE_STEPS - done)
        cfg = TrainConfig(steps=chunk, warmup_steps=min(500, chunk) if done == 0 else 0,
                          seed=seed + done)
        _, rows = train_base(model, data, cfg)
        done += chunk
        log(f"  {out.name}: step {done}  L_simple {rows[-1]['loss_simple']:.4f}  "
            f"interframe {interframe(model):.5f}")
    save_model(model, out)
    log(f"saved {out}")


def train_adapter_staged(base_path, rank, seed, stream_seed, out, style=None):
    model = load_model(base_path)
    kind = "stylization" if style else "consistency"
    adapter = init_adapter(model, rank=rank, seed=seed, kind=kind)
    if style:
        data = clip_stream(8, seed=stream_seed, style=style)
        adapter.meta["style"] = style
    else:
        data = clip_stream(8, seed=stream_seed, static=True)
    done = 0
    while done < ADAPTER_STEPS:
        chunk = min(EVAL_EVERY, ADAPTER_STEPS - done)
        cfg = TrainConfig(steps=chunk, warmup_steps=min(200, chunk) if done == 0 else 0,
                          lr_peak=ADAPTER_LR, seed=seed + done)
        if style:
            _, rows = train_ufo_style(model, adapter, data, cfg)
        else:
            _, rows = train_ufo_consistency(model, adapter, data, cfg)
        done += chunk
        late = np.mean([r["loss_simple"] for r in rows[-100:]])
        log(f"  {out.name}: step {done}  L_simple(last100) {late:.4f}")
    adapter.meta.update(train_steps=ADAPTER_STEPS, train_seed=seed)
    save_adapter(adapter, out)
    if not style:
        log(f"  {out.name}: interframe a=1 {interframe(model, attach(model, adapter, 1.0)):.5f} "
            f"vs a=0 {interframe(model):.5f}")
    log(f"saved {out}")


STAGES = {
    "base-a":   lambda: train_base_staged(11, 1011, ASSETS / "base-a.ufom"),
    "base-b":   lambda: train_base_staged(22, 1022, ASSETS / "base-b.ufom"),
    "ufo-a-d4":  lambda: train_adapter_staged(ASSETS / "base-a.ufom", 4, 33, 1033,
                                              ASSETS / "ufo-a-d4.ufoa"),
    "ufo-a-d1":  lambda: train_adapter_staged(ASSETS / "base-a.ufom", 1, 44, 1044,
                                              ASSETS / "ufo-a-d1.ufoa"),
    "ufo-a-d64": lambda: train_adapter_staged(ASSETS / "base-a.ufom", 64, 55, 1055,
                                              ASSETS / "ufo-a-d64.ufoa"),
    "ufo-b-d4":  lambda: train_adapter_staged(ASSETS / "base-b.ufom", 4, 66, 1066,
                                              ASSETS / "ufo-b-d4.ufoa"),
    "ufo-style": lambda: train_adapter_staged(ASSETS / "base-a.ufom", 4, 77, 1077,
                                              ASSETS / "ufo-style-a.ufoa", style="invert"),
}

OUTPUTS = {
    "base-a": "base-a.ufom", "base-b": "base-b.ufom",
    "ufo-a-d4": "ufo-a-d4.ufoa", "ufo-a-d1": "ufo-a-d1.ufoa",
    "ufo-a-d64": "ufo-a-d64.ufoa", "ufo-b-d4": "ufo-b-d4.ufoa",
    "ufo-style": "ufo-style-a.ufoa",
}


def main(argv):
    ASSETS.mkdir(exist_ok=True)
    wanted = argv or list(STAGES)
    for name in wanted:
        out = ASSETS / OUTPUTS[name]
        if out.exists():
            log(f"skip {name} ({out.name} exists)")
            continue
        log(f"stage {name}")
        STAGES[name]()
    log("all stages complete")


if __name__ == "__main__":
    main(sys.argv[1:])
