#!/usr/bin/env python3
"""Convert torchvision VGG19 weights into a dfc-dit loss-network archive.

torchvision's VGG19 expects RGB in [0, 1] normalised by per-channel mean and
std. The loss network instead subtracts per-channel means from [0, 255]
values, so the std (and the 1/255) are folded into conv1_1:

    W1' = W1 / (255 * std_c),  means = 255 * mean_c

Usage:
    convert_vgg19.py OUT.bin                      # downloads ImageNet weights
    convert_vgg19.py OUT.bin --state-dict vgg19.pth
    convert_vgg19.py OUT.bin --random-init --seed 0
"""

import argparse
import json
import struct
import sys

import numpy as np

MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)
BLOCKS = (2, 2, 4, 4, 1)  # convs per block up to conv5_1


def conv_names():
    for block, count in enumerate(BLOCKS, start=1):
        for i in range(1, count + 1):
            yield f"conv{block}_{i}"


def load_model(args):
    import torch
    import torchvision

    if args.random_init:
        torch.manual_seed(args.seed)
        return torchvision.models.vgg19(weights=None)
    if args.state_dict:
        model = torchvision.models.vgg19(weights=None)
        model.load_state_dict(torch.load(args.state_dict, map_location="cpu"))
        return model
    return torchvision.models.vgg19(weights=torchvision.models.VGG19_Weights.IMAGENET1K_V1)


def convert(model):
    import torch

    convs = [m for m in model.features if isinstance(m, torch.nn.Conv2d)]
    tensors = []
    for name, conv in zip(conv_names(), convs):
        w = conv.weight.detach().double().numpy().copy()
        b = conv.bias.detach().double().numpy().copy()
        if name == "conv1_1":
            w /= (255.0 * np.asarray(STD)).reshape(1, 3, 1, 1)
        tensors.append((f"{name}.weight", w.astype("<f4")))
        tensors.append((f"{name}.bias", b.astype("<f4")))
    return tensors


def write_archive(path, tensors, metadata):
    entries, offset = [], 0
    for name, data in tensors:
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        offset += 4 * data.size
    header = {
        "format": "dfc-dit-weights",
        "version": 1,
        "architecture": "vgg19",
        "means": [255.0 * m for m in MEAN],
        "metadata": metadata,
        "tensors": entries,
    }
    raw = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(raw)))
        f.write(raw)
        for _, data in tensors:
            f.write(np.ascontiguousarray(data).tobytes())


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("out")
    p.add_argument("--state-dict", help="torchvision vgg19 state dict (.pth)")
    p.add_argument("--random-init", action="store_true", help="random weights, for testing the conversion")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    model = load_model(args).eval()
    source = "random-init" if args.random_init else (args.state_dict or "torchvision IMAGENET1K_V1")
    write_archive(args.out, convert(model), {"source": source, "normalization": "folded into conv1_1"})
    print(f"wrote {args.out}", file=sys.stderr)


if __name__ == "__main__":
    main()
