"""Regenerates pamr_reference.json with the published PyTorch PAMR formulation."""
import json

import torch
import torch.nn.functional as F

H, W, C = 9, 11, 3
DILATIONS = [1, 2, 4, 8, 12, 24]
ITERATIONS = 10

NEIGHBOURS = [(0, 0), (0, 1), (0, 2), (1, 0), (1, 2), (2, 0), (2, 1), (2, 2)]


def unfold(x, kernel):
    b, k, h, w = x.shape
    x = x.reshape(b * k, 1, h, w)
    out = []
    for d in DILATIONS:
        padded = F.pad(x, [d] * 4, mode="replicate")
        out.append(F.conv2d(padded, kernel, dilation=d))
    return torch.cat(out, 1).reshape(b, k, -1, h, w)


def kernels():
    diff = torch.zeros(8, 1, 3, 3, dtype=torch.float64)
    copy = torch.zeros(8, 1, 3, 3, dtype=torch.float64)
    for i, (r, c) in enumerate(NEIGHBOURS):
        diff[i, 0, 1, 1] = 1
        diff[i, 0, r, c] = -1
        copy[i, 0, r, c] = 1
    every = torch.zeros(9, 1, 3, 3, dtype=torch.float64)
    for i in range(9):
        every[i, 0, i // 3, i % 3] = 1
    return diff, copy, every


def pamr(image, mask):
    diff, copy, every = kernels()
    std = unfold(image, every).std(2, keepdim=True)
    aff = -unfold(image, diff).abs() / (1e-8 + 0.1 * std)
    aff = F.softmax(aff.mean(1, keepdim=True), 2)
    for _ in range(ITERATIONS):
        mask = (unfold(mask, copy) * aff).sum(2)
    return mask


image = torch.tensor(
    [[[((y * 7 + x * 13 + c * 5) % 11) / 10 for x in range(W)] for y in range(H)] for c in range(3)],
    dtype=torch.float64,
)[None]
logits = torch.tensor(
    [[[((y * 3 + x * 5 + c * 7) % 9) / 4 for x in range(W)] for y in range(H)] for c in range(C)],
    dtype=torch.float64,
)[None]
out = pamr(image, F.softmax(logits, 1))[0]

with open("pamr_reference.json", "w") as f:
    json.dump(
        {
            "height": H,
            "width": W,
            "classes": C,
            "dilations": DILATIONS,
            "iterations": ITERATIONS,
            "output": [round(v, 9) for v in out.flatten().tolist()],
        },
        f,
        indent=1,
    )
