"""Writes forward-parity fixtures for the backbone tests.

For each model: <dir>/<name>.weights.safetensors (random-init upstream
weights with perturbed BN statistics), <dir>/<name>.io.safetensors holding
a fixed input batch and the upstream pooled features. Run the Rust side
with CARID_PARITY_DIR=<dir>.

usage: python parity_export.py <dir>
"""
import sys
from pathlib import Path

import timm
import torch
import torchvision
from safetensors.torch import save_file

MODELS = {
    "resnet50": (lambda: torchvision.models.resnet50(), 224),
    "densenet161": (lambda: torchvision.models.densenet161(), 224),
    "efficientnetv2_b2": (lambda: timm.create_model("tf_efficientnetv2_b2"), 288),
    "mobilevit_s": (lambda: timm.create_model("mobilevit_s"), 256),
    "swin_s3_tiny": (lambda: timm.create_model("swin_s3_tiny_224"), 224),
    "coat_lite_mini": (lambda: timm.create_model("coat_lite_mini"), 224),
}


def pooled(model, x):
    if hasattr(model, "forward_head"):
        return model.forward_head(model.forward_features(x), pre_logits=True)
    # torchvision
    for attr in ("fc", "classifier"):
        if hasattr(model, attr):
            setattr(model, attr, torch.nn.Identity())
    return model(x)


def main(out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    torch.manual_seed(0)
    for name, (make, size) in MODELS.items():
        model = make().eval()
        with torch.no_grad():
            for mod in model.modules():
                if isinstance(mod, torch.nn.BatchNorm2d):
                    mod.running_mean.uniform_(-0.1, 0.1)
                    mod.running_var.uniform_(0.5, 1.5)
                    mod.weight.uniform_(0.5, 1.5)
                    mod.bias.uniform_(-0.1, 0.1)
            sd = {k: v.contiguous().clone() for k, v in model.state_dict().items() if v.dtype.is_floating_point}
            save_file(sd, str(out / f"{name}.weights.safetensors"))
            x = torch.randn(2, 3, size, size)
            feats = pooled(model, x)
        save_file({"input": x.contiguous(), "features": feats.contiguous()}, str(out / f"{name}.io.safetensors"))
        print(name, tuple(feats.shape), float(feats.abs().mean()))


if __name__ == "__main__":
    main(sys.argv[1])
