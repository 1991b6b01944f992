"""Wire-protocol v1 entry point: request JSON in, trace file out.

The joint training loss is the loss-weighted sum of cross-entropy at every
active exit plus the final classifier. After training, one validation pass
computes the per-exit softmax score margin (top-1 minus top-2 probability)
and correctness per sample; these are written as a CSV trace with a JSON
footer carrying the measured final-exit error.
"""

from __future__ import annotations

import json
import math
import sys
import time

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetUnavailable, load_dataset, split_train_val
from .model import EarlyExitNet

EVALUATOR_VERSION = "exittrainer-0.1.0"
TRACE_SCHEMA = "exit-trace/v1"

DEFAULTS = {
    "subset_size": 2000,
    "val_fraction": 0.10,
    "batch_size": 64,
    "learning_rate": 0.1,
    "momentum": 0.9,
    "data_root": "./data",
}


def _resize(images, resolution):
    if images.shape[-1] != resolution:
        images = F.interpolate(images, size=(resolution, resolution), mode="bilinear",
                               align_corners=False)
    # channels-last enables the faster oneDNN convolution paths on CPU
    return images.contiguous(memory_format=torch.channels_last)


def train_model(model, train_data, options, epochs, loss_weight, seed):
    """Joint SGD training; returns the last epoch's mean loss."""
    images, labels = train_data
    torch.manual_seed(seed)
    opt = torch.optim.SGD(
        model.parameters(),
        lr=options["learning_rate"],
        momentum=options["momentum"],
    )
    n = len(images)
    batch = int(options["batch_size"])
    gen = torch.Generator().manual_seed(seed + 7)
    model.train()
    last = float("nan")
    for _ in range(epochs):
        order = torch.randperm(n, generator=gen)
        total = 0.0
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            x = _resize(images[idx], model.input_resolution)
            y = labels[idx]
            opt.zero_grad()
            outputs = model(x)
            # heads end in softmax; NLL of the log probabilities is the
            # cross-entropy of the logits
            loss = x.new_zeros(())
            for probs in outputs:
                loss = loss + loss_weight * F.nll_loss(torch.log(probs + 1e-12), y)
            if not torch.isfinite(loss):
                return float("nan")
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        last = total / n
    return last


def margins_and_correct(model, val_data, batch_size=256):
    """Per-exit (margin, correct) matrices over the validation set."""
    images, labels = val_data
    model.eval()
    margin_rows, correct_rows = [], []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            x = _resize(images[start:start + batch_size], model.input_resolution)
            y = labels[start:start + batch_size]
            outputs = model(x)
            batch_margins, batch_correct = [], []
            for probs in outputs:
                p = probs.double()
                top2 = torch.topk(p, 2, dim=1).values
                batch_margins.append((top2[:, 0] - top2[:, 1]).numpy())
                batch_correct.append((p.argmax(dim=1) == y).numpy())
            margin_rows.append(np.stack(batch_margins, axis=1))
            correct_rows.append(np.stack(batch_correct, axis=1))
    return np.concatenate(margin_rows), np.concatenate(correct_rows)


def write_trace_file(path, margins, correct, exit_positions, genome_id, seed, footer):
    n, e = margins.shape
    header = {
        "schema": TRACE_SCHEMA,
        "n_samples": n,
        "n_exits": e,
        "exit_positions": list(exit_positions),
        "genome_id": genome_id,
        "seed": seed,
        "body": "csv",
        "byte_order": "little",
    }
    with open(path, "w") as f:
        f.write(json.dumps(header) + "\n")
        for i in range(n):
            cells = [repr(float(np.clip(m, 0.0, 1.0))) for m in margins[i]]
            cells += [str(int(c)) for c in correct[i]]
            f.write(",".join(cells) + "\n")
        f.write(json.dumps(footer) + "\n")


def run_request(request_path):
    started = time.monotonic()
    with open(request_path) as f:
        request = json.load(f)
    if str(request.get("schema_version")) != "1":
        raise ValueError(f"unsupported request schema {request.get('schema_version')!r}")
    genome = request["genome"]
    space = request["space"]
    seed = int(request["seed"])
    epochs = int(request["training_epochs"])
    loss_weight = float(request.get("loss_weight", 1.0))
    options = dict(DEFAULTS)
    options.update(request.get("options") or {})
    output_path = request["output_path"]

    images, labels, n_classes = load_dataset(
        request["dataset_id"], int(options["subset_size"]), seed,
        data_root=options["data_root"],
    )
    if n_classes != int(space["num_classes"]):
        raise ValueError(
            f"dataset has {n_classes} classes, search space expects {space['num_classes']}"
        )
    train_data, val_data = split_train_val(images, labels, float(options["val_fraction"]), seed)

    torch.manual_seed(seed)
    model = EarlyExitNet(genome, space).to(memory_format=torch.channels_last)
    final_loss = train_model(model, train_data, options, epochs, loss_weight, seed)

    footer_base = {
        "evaluator_version": EVALUATOR_VERSION,
        "training_epochs": epochs,
        "loss_weight": loss_weight,
        "optimizer": f"sgd(lr={options['learning_rate']}, momentum={options['momentum']})",
        "dataset_id": request["dataset_id"],
        "train_samples": len(train_data[0]),
        "val_samples": len(val_data[0]),
        "final_train_loss": None if math.isnan(final_loss) else final_loss,
    }
    if math.isnan(final_loss):
        margins = np.zeros((len(val_data[0]), len(model.exit_positions) + 1))
        correct = np.zeros_like(margins, dtype=bool)
        footer = dict(footer_base, failed=True, reason="non-finite training loss",
                      measured_error=1.0, wall_time_s=time.monotonic() - started)
        write_trace_file(output_path, margins, correct, model.exit_positions,
                         str(genome.get("genome_id", "")), seed, footer)
        return 0

    margins, correct = margins_and_correct(model, val_data)
    measured_error = 1.0 - float(correct[:, -1].mean())
    footer = dict(footer_base, measured_error=measured_error,
                  wall_time_s=time.monotonic() - started)
    write_trace_file(output_path, margins, correct, model.exit_positions,
                     str(genome.get("genome_id", "")), seed, footer)
    return 0


def main(argv=None):
    argv = argv if argv is not None else sys.argv[1:]
    if len(argv) != 1:
        print("usage: exittrainer <request.json>", file=sys.stderr)
        return 2
    try:
        return run_request(argv[0])
    except DatasetUnavailable as exc:
        print(f"evaluator-unavailable: {exc}", file=sys.stderr)
        return 3
    except Exception as exc:  # surface anything else as a protocol failure
        print(f"evaluator error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
