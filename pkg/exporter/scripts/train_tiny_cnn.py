#!/usr/bin/env python3
"""Train the tiny digits CNN behind the bundled fixtures and save the
checkpoint to exporter/assets/tiny_digits_cnn.pt.

Provenance script for the committed artifact; the exporter itself only
converts. A seeded shuffle holds out 200 samples (the exporter's evaluation
subset); training uses the rest. Fully seeded.
"""

import os
import sys

import numpy as np
import torch
from sklearn.datasets import load_digits
from torch import nn

sys.path.insert(0, os.path.join(os.path.dirname(__file__), "..", "src"))
from ccexport.cli import digits_split_indices  # noqa: E402

HOLDOUT = 200
SEED = 7
EPOCHS = 300


def build_model() -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(1, 8, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.ReLU(),
        nn.MaxPool2d(2),
        nn.Flatten(),
        nn.Linear(64, 32),
        nn.ReLU(),
        nn.Linear(32, 10),
    )


def main() -> None:
    torch.manual_seed(SEED)
    np.random.seed(SEED)
    d = load_digits()
    x = (d.images / 16.0).astype(np.float32)[:, None, :, :]
    y = d.target.astype(np.int64)
    val_idx = digits_split_indices(HOLDOUT, len(x))
    train_mask = np.ones(len(x), dtype=bool)
    train_mask[val_idx] = False
    x_train, y_train = x[train_mask], y[train_mask]
    x_val, y_val = x[val_idx], y[val_idx]

    model = build_model()
    opt = torch.optim.Adam(model.parameters(), lr=1e-3)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=[150, 240], gamma=0.1)
    loss_fn = nn.CrossEntropyLoss()
    xt = torch.from_numpy(x_train)
    yt = torch.from_numpy(y_train)
    n = len(xt)
    gen = torch.Generator().manual_seed(SEED)
    for epoch in range(EPOCHS):
        model.train()
        perm = torch.randperm(n, generator=gen)
        for i in range(0, n, 64):
            idx = perm[i : i + 64]
            opt.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            loss.backward()
            opt.step()
        sched.step()
        if (epoch + 1) % 50 == 0:
            model.eval()
            with torch.no_grad():
                val_acc = (
                    (model(torch.from_numpy(x_val)).argmax(1).numpy() == y_val).mean()
                )
                train_acc = (model(xt).argmax(1).numpy() == y_train).mean()
            print(f"epoch {epoch + 1:3d}  train {train_acc:.4f}  holdout {val_acc:.4f}")

    model.eval()
    out = os.path.join(os.path.dirname(__file__), "..", "assets", "tiny_digits_cnn.pt")
    out = os.path.normpath(out)
    os.makedirs(os.path.dirname(out), exist_ok=True)
    torch.save(model, out)
    print(f"saved {out}")


if __name__ == "__main__":
    main()
