"""Regenerate the tiny ONNX backbone fixtures used by the runtime tests.

Writes a 4-layer strided CNN with named outputs `stage2` (stride 8) and
`stage3` (stride 16), a variant missing `stage3`, a parity fixture
(input + expected outputs as RSFT tensors) and an export manifest.
"""
import json
import struct

import numpy as np
import torch
import torch.nn as nn

SIDE = 64


def write_rsft(path, array):
    array = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as f:
        f.write(b"RSFT")
        f.write(struct.pack("<HBB", 1, 0, array.ndim))
        for d in array.shape:
            f.write(struct.pack("<Q", d))
        f.write(array.tobytes())


class Tiny(nn.Module):
    def __init__(self):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(3, 4, 3, 2, 1), nn.ReLU(), nn.Conv2d(4, 4, 3, 2, 1), nn.ReLU()
        )
        self.layer2 = nn.Sequential(nn.Conv2d(4, 8, 3, 2, 1), nn.ReLU())
        self.layer3 = nn.Sequential(nn.Conv2d(8, 16, 3, 2, 1), nn.ReLU())

    def forward(self, x):
        s2 = self.layer2(self.stem(x))
        return s2, self.layer3(s2)


class MissingStage3(Tiny):
    def forward(self, x):
        return self.layer2(self.stem(x))


def main():
    torch.manual_seed(0)
    model = Tiny().eval()
    x = torch.randn(1, 3, SIDE, SIDE)
    torch.onnx.export(model, x, "tiny_backbone.onnx", input_names=["input"],
                      output_names=["stage2", "stage3"], opset_version=13, dynamo=False)
    broken = MissingStage3().eval()
    broken.load_state_dict(model.state_dict())
    torch.onnx.export(broken, x, "tiny_missing_stage3.onnx", input_names=["input"],
                      output_names=["stage2"], opset_version=13, dynamo=False)
    with torch.no_grad():
        s2, s3 = model(x)
    write_rsft("fixture_input.rsft", x.numpy())
    write_rsft("fixture_stage2.rsft", s2.numpy())
    write_rsft("fixture_stage3.rsft", s3.numpy())
    manifest = {
        "architecture": "tiny-strided-cnn",
        "weights": "torch.manual_seed(0)",
        "opset": 13,
        "input_shape": [1, 3, SIDE, SIDE],
        "outputs": {"stage2": list(s2.shape), "stage3": list(s3.shape)},
    }
    with open("manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)


if __name__ == "__main__":
    main()
