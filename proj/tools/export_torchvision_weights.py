#!/usr/bin/env python3
# Copyright (c) 2026 The crackseg Authors
# SPDX-License-Identifier: Apache-2.0
"""Export a torchvision ResNet-50 state dict as a crackseg weights archive.

The crackseg backbone keeps torchvision's parameter names (conv1, bn1,
layer1..layer4 with conv/bn/downsample children), so the export is a
name-preserving repack into the archive format the C++ loader reads:

    magic 'CSEGARCH' | u32 version | u64 header length | JSON header |
    concatenated little-endian float32 tensor data

The classifier head (fc.*) and BatchNorm bookkeeping counters are
dropped; the modified backbone ignores the archive's layer4.2.* entries
because that block is removed from the network.

Usage:
    export_torchvision_weights.py --out resnet50_imagenet.ckpt
    export_torchvision_weights.py --weights resnet50-0676ba61.pth --out ...

Without --weights the ImageNet weights are fetched through torchvision's
model zoo, which needs network access and a 'torchvision' install.
"""

import argparse
import json
import struct
import sys

MAGIC = b"CSEGARCH"
FORMAT_VERSION = 1

DROPPED_PREFIXES = ("fc.",)
DROPPED_SUFFIXES = ("num_batches_tracked",)


def load_state_dict(weights_path):
    import torch

    if weights_path:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        if not isinstance(state, dict):
            raise SystemExit(f"error: '{weights_path}' does not hold a state dict")
        source = weights_path
    else:
        from torchvision.models import ResNet50_Weights, resnet50

        # V1 is the original training recipe; its stride sits on each
        # bottleneck's first convolution like the architecture used here.
        weights = ResNet50_Weights.IMAGENET1K_V1
        state = resnet50(weights=weights).state_dict()
        source = f"torchvision {weights}"
    return state, source


def exported_items(state):
    import torch

    for name, tensor in state.items():
        if any(name.startswith(p) for p in DROPPED_PREFIXES):
            continue
        if any(name.endswith(s) for s in DROPPED_SUFFIXES):
            continue
        yield name, tensor.detach().cpu().to(dtype=torch.float32)


def write_archive(items, meta, out_path):
    manifest = []
    blobs = []
    offset = 0
    for name, tensor in items:
        data = tensor.numpy().astype("<f4", copy=False).tobytes()
        manifest.append(
            {
                "name": name,
                "shape": list(tensor.shape),
                "dtype": "f32",
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)

    header = json.dumps(
        {"format": FORMAT_VERSION, "meta": meta, "tensors": manifest}
    ).encode("utf-8")
    with open(out_path, "wb") as out:
        out.write(MAGIC)
        out.write(struct.pack("<I", FORMAT_VERSION))
        out.write(struct.pack("<Q", len(header)))
        out.write(header)
        for blob in blobs:
            out.write(blob)
    return len(manifest), offset


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument(
        "--weights",
        help="local torchvision ResNet-50 .pth state dict; omit to download "
        "the ImageNet weights through torchvision",
    )
    parser.add_argument("--out", required=True, help="archive file to write")
    args = parser.parse_args()

    state, source = load_state_dict(args.weights)
    items = list(exported_items(state))
    if not any(name == "conv1.weight" for name, _ in items):
        raise SystemExit(
            "error: no 'conv1.weight' in the state dict; is this a ResNet-50?"
        )

    meta = {
        "kind": "pretrained_backbone",
        "architecture": "resnet50",
        "source": source,
        "pretraining": "imagenet",
    }
    count, nbytes = write_archive(items, meta, args.out)
    print(f"wrote {count} tensors ({nbytes / 1e6:.1f} MB) to '{args.out}'")
    return 0


if __name__ == "__main__":
    sys.exit(main())
