"""Weight-sharing elastic bottleneck network with an EMA teacher copy.

One parameter store holds the largest architecture; any descriptor in the
space runs by slicing the leading channels of every convolution and the
leading blocks of every stage.  A frozen teacher copy of the same shapes is
advanced as an exponential moving average of the student and is only ever
evaluated at the largest architecture.

Normalization layers use batch statistics during training and never maintain
running buffers; inference statistics are produced on demand per descriptor by
`calibrate_norm_stats` and cached on the state, keyed by (branch, descriptor).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .archspace import (
    STAGE_COUNT,
    STAGE_STRIDES,
    STEM_IMAGENET,
    STEM_SMALL,
    ArchDescriptor,
    ModelSpace,
)
from .seeding import STREAM_INIT, stream_rng

_BN_EPS = 1e-5

STAGE_NAMES = ("C2", "C3", "C4", "C5")

STUDENT = "student"
TEACHER = "teacher"


class BranchError(ValueError):
    """Unknown branch name; expected 'student' or 'teacher'."""


class TeacherArchError(ValueError):
    """The teacher only ever runs the largest architecture."""


@dataclass
class FeatureBundle:
    """Embeddings and stage maps for a batch (images along dim 0).

    `z` is the L2-normalized projection-head output [B, embed_dim]; `stages`
    maps C2..C5 to post-stage maps [B, C_i, H_i, W_i].  Indexing returns the
    bundle of a single image.
    """

    z: Tensor
    stages: dict

    def __len__(self) -> int:
        return self.z.shape[0]

    def __getitem__(self, index: int) -> "FeatureBundle":
        return FeatureBundle(
            z=self.z[index],
            stages={name: m[index] for name, m in self.stages.items()},
        )


class ElasticConv2d(nn.Module):
    """Conv whose leading output/input channels are sliced at call time."""

    def __init__(self, max_in: int, max_out: int, kernel_size: int,
                 stride: int = 1, padding: int = 0):
        super().__init__()
        self.max_in = max_in
        self.max_out = max_out
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        self.weight = nn.Parameter(
            torch.empty(max_out, max_in, kernel_size, kernel_size)
        )

    def forward(self, x: Tensor, out_channels: int) -> Tensor:
        in_channels = x.shape[1]
        weight = self.weight[:out_channels, :in_channels].contiguous()
        return F.conv2d(x, weight, None, self.stride, self.padding)


class ElasticBatchNorm2d(nn.Module):
    """Batch norm with sliced affine parameters and externally supplied stats.

    Training mode normalizes with batch statistics.  Inference mode uses the
    (mean, var) pair passed in, falling back to zeros/ones when none exists
    yet for the active descriptor.
    """

    def __init__(self, max_channels: int):
        super().__init__()
        self.max_channels = max_channels
        self.weight = nn.Parameter(torch.empty(max_channels))
        self.bias = nn.Parameter(torch.empty(max_channels))
        self.stats_key = ""  # assigned by the owning encoder

    def forward(
        self,
        x: Tensor,
        train_norm: bool,
        stats: "tuple[Tensor, Tensor] | None",
        observer: "dict | None",
    ) -> Tensor:
        c = x.shape[1]
        if observer is not None and self.stats_key in observer:
            # Observation is opt-in per layer: the calibration sweep registers
            # only the layer it is currently measuring.
            entry = observer[self.stats_key]
            if entry is None:
                entry = [torch.zeros(c, dtype=torch.float64),
                         torch.zeros(c, dtype=torch.float64), 0]
                observer[self.stats_key] = entry
            xs = x.detach().to(torch.float64)
            entry[0] += xs.sum(dim=(0, 2, 3))
            entry[1] += (xs * xs).sum(dim=(0, 2, 3))
            entry[2] += x.shape[0] * x.shape[2] * x.shape[3]
        weight = self.weight[:c]
        bias = self.bias[:c]
        if train_norm and stats is None:
            return F.batch_norm(x, None, None, weight, bias, True, 0.0, _BN_EPS)
        if stats is None:
            mean = torch.zeros(c, dtype=x.dtype)
            var = torch.ones(c, dtype=x.dtype)
        else:
            # In training mode a provided entry means the progressive
            # calibration sweep has already frozen this layer's moments.
            mean = stats[0][:c].to(x.dtype)
            var = stats[1][:c].to(x.dtype)
        return F.batch_norm(x, mean, var, weight, bias, False, 0.0, _BN_EPS)


class ElasticLinear(nn.Module):
    """Linear layer whose input features are sliced at call time."""

    def __init__(self, max_in: int, out_features: int):
        super().__init__()
        self.max_in = max_in
        self.out_features = out_features
        self.weight = nn.Parameter(torch.empty(out_features, max_in))
        self.bias = nn.Parameter(torch.empty(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight[:, : x.shape[1]].contiguous(), self.bias)


class _ElasticBottleneck(nn.Module):
    """1x1 (strided) -> 3x3 -> 1x1 with expansion; projection shortcut on the
    first block of a stage."""

    def __init__(self, max_in: int, max_width: int, max_out: int,
                 stride: int, has_downsample: bool):
        super().__init__()
        self.stride = stride
        self.conv1 = ElasticConv2d(max_in, max_width, 1, stride=stride)
        self.bn1 = ElasticBatchNorm2d(max_width)
        self.conv2 = ElasticConv2d(max_width, max_width, 3, stride=1, padding=1)
        self.bn2 = ElasticBatchNorm2d(max_width)
        self.conv3 = ElasticConv2d(max_width, max_out, 1)
        self.bn3 = ElasticBatchNorm2d(max_out)
        if has_downsample:
            self.down_conv = ElasticConv2d(max_in, max_out, 1, stride=stride)
            self.down_bn = ElasticBatchNorm2d(max_out)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x, width, out_channels, train_norm, stats, observer):
        def norm(bn, h):
            entry = None if stats is None else stats.get(bn.stats_key)
            return bn(h, train_norm, entry, observer)

        h = F.relu(norm(self.bn1, self.conv1(x, width)), inplace=True)
        h = F.relu(norm(self.bn2, self.conv2(h, width)), inplace=True)
        h = norm(self.bn3, self.conv3(h, out_channels))
        if self.down_conv is not None:
            shortcut = norm(self.down_bn, self.down_conv(x, out_channels))
        else:
            shortcut = x
        return F.relu(h + shortcut, inplace=True)


class ElasticEncoder(nn.Module):
    """Sliceable backbone plus elastic-input projection head."""

    def __init__(self, space: ModelSpace, embed_dim: int = 128,
                 projection_hidden: int = 512):
        super().__init__()
        self.space = space
        self.embed_dim = embed_dim
        self.projection_hidden = projection_hidden
        max_stem = space.stem.max
        if space.stem_plan == STEM_IMAGENET:
            self.stem_conv = ElasticConv2d(3, max_stem, 7, stride=2, padding=3)
            self.stem_pool = nn.MaxPool2d(3, stride=2, padding=1)
        else:
            self.stem_conv = ElasticConv2d(3, max_stem, 3, stride=1, padding=1)
            self.stem_pool = None
        self.stem_bn = ElasticBatchNorm2d(max_stem)
        stages = []
        cin = max_stem
        for i in range(STAGE_COUNT):
            max_w = space.widths[i].max
            max_out = max_w * space.expansion
            blocks = []
            for b in range(space.depths[i].max):
                blocks.append(
                    _ElasticBottleneck(
                        cin if b == 0 else max_out,
                        max_w,
                        max_out,
                        stride=STAGE_STRIDES[i] if b == 0 else 1,
                        has_downsample=b == 0,
                    )
                )
            stages.append(nn.ModuleList(blocks))
            cin = max_out
        self.stages = nn.ModuleList(stages)
        self.max_c5 = cin
        self.fc1 = ElasticLinear(cin, projection_hidden)
        self.fc2 = nn.Linear(projection_hidden, embed_dim)
        for name, module in self.named_modules():
            if isinstance(module, ElasticBatchNorm2d):
                module.stats_key = name

    def forward(
        self,
        x: Tensor,
        d: ArchDescriptor,
        train_norm: bool = False,
        stats: "dict | None" = None,
        observer: "dict | None" = None,
    ) -> FeatureBundle:
        def norm(bn, h):
            entry = None if stats is None else stats.get(bn.stats_key)
            return bn(h, train_norm, entry, observer)

        h = self.stem_conv(x, d.stem_width)
        h = F.relu(norm(self.stem_bn, h), inplace=True)
        if self.stem_pool is not None:
            h = self.stem_pool(h)
        stage_maps: dict[str, Tensor] = {}
        for i, name in enumerate(STAGE_NAMES):
            width = d.stage_widths[i]
            out_channels = width * self.space.expansion
            for b in range(d.stage_depths[i]):
                h = self.stages[i][b](
                    h, width, out_channels, train_norm, stats, observer
                )
            stage_maps[name] = h
        pooled = h.mean(dim=(2, 3))
        z = self.fc2(F.relu(self.fc1(pooled)))
        z = F.normalize(z, dim=-1)
        return FeatureBundle(z=z, stages=stage_maps)


def _init_parameters(module: nn.Module, rng: np.random.Generator) -> None:
    """Fan-out-scaled normal init for convs/linears, identity affine for norms.

    The scale of each residual branch's final norm starts at zero so every
    block begins as an identity (or plain projection) map.  Without this the
    stacked ReLU stages contract all inputs into a narrow cone at
    initialization, which leaves the contrastive loss near its collapsed
    fixed point where positives and negatives are indistinguishable.

    Draws come from the numpy generator so initialization is reproducible and
    serializable independent of torch's global RNG.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            if param.ndim == 4:  # conv weight
                fan_out = param.shape[0] * param.shape[2] * param.shape[3]
                std = float(np.sqrt(2.0 / fan_out))
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif param.ndim == 2:  # linear weight
                std = float(np.sqrt(2.0 / param.shape[0]))
                values = rng.normal(0.0, std, size=tuple(param.shape))
                param.copy_(torch.from_numpy(values.astype(np.float32)))
            elif name.endswith("bias"):
                param.zero_()
            elif name.endswith("bn3.weight"):  # residual-branch gate
                param.zero_()
            else:  # norm scale
                param.fill_(1.0)


@dataclass
class SupernetState:
    """Student parameters, frozen EMA teacher, and calibration cache.

    The negative-key queue is attached by the trainer; it lives here so the
    checkpoint container can capture the full training state.
    """

    space: ModelSpace
    embed_dim: int
    seed: int
    student: ElasticEncoder
    teacher: ElasticEncoder
    iteration: int = 0
    queue: "object | None" = None
    norm_cache: dict = field(default_factory=dict)

    def net(self, branch: str) -> ElasticEncoder:
        if branch == STUDENT:
            return self.student
        if branch == TEACHER:
            return self.teacher
        raise BranchError(f"unknown branch {branch!r}")


def build_supernet(
    space: ModelSpace,
    embed_dim: int = 128,
    seed: int = 0,
    projection_hidden: int = 512,
) -> SupernetState:
    """Construct student and teacher at the largest shapes; teacher starts as
    an exact frozen copy of the student."""
    if embed_dim < 1:
        raise ValueError(f"embed_dim must be positive, got {embed_dim}")
    student = ElasticEncoder(space, embed_dim, projection_hidden)
    _init_parameters(student, stream_rng(seed, STREAM_INIT))
    teacher = ElasticEncoder(space, embed_dim, projection_hidden)
    teacher.load_state_dict(student.state_dict())
    for param in teacher.parameters():
        param.requires_grad_(False)
    return SupernetState(
        space=space,
        embed_dim=embed_dim,
        seed=seed,
        student=student,
        teacher=teacher,
    )


def forward(
    state: SupernetState,
    branch: str,
    d: ArchDescriptor,
    batch: Tensor,
    *,
    train_norm: bool = False,
) -> FeatureBundle:
    """Run one branch at descriptor `d`.

    The teacher only accepts the largest architecture.  In inference mode the
    per-descriptor calibrated statistics are used when present.
    """
    net = state.net(branch)
    if branch == TEACHER and d != state.space.largest():
        raise TeacherArchError(
            f"teacher must run the largest architecture, got {d.to_dict()}"
        )
    state.space.require_valid(d)
    stats = None if train_norm else state.norm_cache.get((branch, d))
    return net(batch, d, train_norm=train_norm, stats=stats)


def ema_update(state: SupernetState, momentum: float) -> None:
    """teacher <- momentum * teacher + (1 - momentum) * student."""
    if not 0.0 <= momentum <= 1.0:
        raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
    with torch.no_grad():
        for p_s, p_t in zip(state.student.parameters(), state.teacher.parameters()):
            p_t.mul_(momentum).add_(p_s, alpha=1.0 - momentum)


def _active_norm_keys(net: ElasticEncoder, d: ArchDescriptor) -> list[str]:
    """Stats keys of the norm layers descriptor `d` touches, in forward order.

    The order guarantees that each layer's input depends only on layers
    listed before it, which is what the progressive calibration relies on.
    """
    keys = [net.stem_bn.stats_key]
    for i in range(STAGE_COUNT):
        for b in range(d.stage_depths[i]):
            block = net.stages[i][b]
            keys.append(block.bn1.stats_key)
            keys.append(block.bn2.stats_key)
            keys.append(block.bn3.stats_key)
            if block.down_bn is not None:
                keys.append(block.down_bn.stats_key)
    return keys


def calibrate_norm_stats(
    state: SupernetState,
    d: ArchDescriptor,
    data: "Sequence[Tensor] | Tensor",
    passes: int = 1,
    branch: str = STUDENT,
) -> dict:
    """Recompute inference statistics of every norm layer for descriptor `d`.

    Layers are calibrated progressively in forward order: each round runs
    `data` through the subnet with all previously frozen layers using their
    final moments, then freezes the per-channel population mean/variance of
    the next layer's input.  Every layer's statistics are therefore a pure
    per-image function of the data, so the result does not depend on how the
    data is batched or ordered.  The sweep reaches its fixed point in one
    pass; extra passes recompute identical values.  Parameters are untouched.
    Results are stored in the state's cache keyed by (branch, d).
    """
    if passes < 1:
        raise ValueError(f"passes must be positive, got {passes}")
    if isinstance(data, Tensor):
        data = [data]
    else:
        data = list(data)
    if not data or any(batch.shape[0] == 0 for batch in data):
        raise ValueError("calibration data is empty")
    net = state.net(branch)
    if branch == TEACHER and d != state.space.largest():
        raise TeacherArchError("teacher statistics exist only for the largest arch")
    state.space.require_valid(d)
    frozen: dict[str, tuple[Tensor, Tensor]] = {}
    with torch.no_grad():
        for _ in range(passes):
            for key in _active_norm_keys(net, d):
                observer: dict[str, "list | None"] = {key: None}
                for batch in data:
                    net(batch, d, train_norm=True, stats=frozen, observer=observer)
                total, total_sq, count = observer[key]
                mean = total / count
                var = torch.clamp(total_sq / count - mean * mean, min=0.0)
                frozen[key] = (mean.to(torch.float32), var.to(torch.float32))
    state.norm_cache[(branch, d)] = frozen
    return frozen


# ---------------------------------------------------------------------------
# Standalone extraction.
# ---------------------------------------------------------------------------

class _Bottleneck(nn.Module):
    def __init__(self, cin: int, width: int, cout: int, stride: int,
                 has_downsample: bool):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, width, 1, stride=stride, bias=False)
        self.bn1 = nn.BatchNorm2d(width, eps=_BN_EPS)
        self.conv2 = nn.Conv2d(width, width, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(width, eps=_BN_EPS)
        self.conv3 = nn.Conv2d(width, cout, 1, bias=False)
        self.bn3 = nn.BatchNorm2d(cout, eps=_BN_EPS)
        if has_downsample:
            self.down_conv = nn.Conv2d(cin, cout, 1, stride=stride, bias=False)
            self.down_bn = nn.BatchNorm2d(cout, eps=_BN_EPS)
        else:
            self.down_conv = None
            self.down_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.conv1(x)), inplace=True)
        h = F.relu(self.bn2(self.conv2(h)), inplace=True)
        h = self.bn3(self.conv3(h))
        if self.down_conv is not None:
            shortcut = self.down_bn(self.down_conv(x))
        else:
            shortcut = x
        return F.relu(h + shortcut, inplace=True)


class SubnetEncoder(nn.Module):
    """Fixed-shape network matching one descriptor.

    With `head=None` it carries the projection head and its forward returns a
    FeatureBundle with normalized `z`; with `head=k` a k-way classifier
    replaces the projector and `z` holds raw logits.
    """

    def __init__(
        self,
        descriptor: ArchDescriptor,
        *,
        expansion: int = 4,
        stem_plan: str = STEM_SMALL,
        embed_dim: int = 128,
        projection_hidden: int = 512,
        head: "int | None" = None,
    ):
        super().__init__()
        self.descriptor = descriptor
        self.expansion = expansion
        self.stem_plan = stem_plan
        self.projection_hidden = projection_hidden
        self.head = head
        stem_w = descriptor.stem_width
        if stem_plan == STEM_IMAGENET:
            self.stem_conv = nn.Conv2d(3, stem_w, 7, stride=2, padding=3, bias=False)
            self.stem_pool = nn.MaxPool2d(3, stride=2, padding=1)
        else:
            self.stem_conv = nn.Conv2d(3, stem_w, 3, stride=1, padding=1, bias=False)
            self.stem_pool = None
        self.stem_bn = nn.BatchNorm2d(stem_w, eps=_BN_EPS)
        stages = []
        cin = stem_w
        for i in range(STAGE_COUNT):
            width = descriptor.stage_widths[i]
            cout = width * expansion
            blocks = []
            for b in range(descriptor.stage_depths[i]):
                blocks.append(
                    _Bottleneck(
                        cin if b == 0 else cout,
                        width,
                        cout,
                        stride=STAGE_STRIDES[i] if b == 0 else 1,
                        has_downsample=b == 0,
                    )
                )
            stages.append(nn.ModuleList(blocks))
            cin = cout
        self.stages = nn.ModuleList(stages)
        self.c5_channels = cin
        if head is not None:
            self.fc1 = None
            self.fc2 = None
            self.classifier = nn.Linear(cin, head)
        else:
            self.fc1 = nn.Linear(cin, projection_hidden)
            self.fc2 = nn.Linear(projection_hidden, embed_dim)
            self.classifier = None

    def forward(self, x: Tensor) -> FeatureBundle:
        h = F.relu(self.stem_bn(self.stem_conv(x)), inplace=True)
        if self.stem_pool is not None:
            h = self.stem_pool(h)
        stage_maps: dict[str, Tensor] = {}
        for i, name in enumerate(STAGE_NAMES):
            for block in self.stages[i]:
                h = block(h)
            stage_maps[name] = h
        pooled = h.mean(dim=(2, 3))
        if self.classifier is not None:
            z = self.classifier(pooled)
        else:
            z = F.normalize(self.fc2(F.relu(self.fc1(pooled))), dim=-1)
        return FeatureBundle(z=z, stages=stage_maps)


def _copy_bn(src: ElasticBatchNorm2d, dst: nn.BatchNorm2d,
             channels: int, stats: "dict | None") -> None:
    with torch.no_grad():
        dst.weight.copy_(src.weight[:channels])
        dst.bias.copy_(src.bias[:channels])
        entry = None if stats is None else stats.get(src.stats_key)
        if entry is not None:
            dst.running_mean.copy_(entry[0][:channels])
            dst.running_var.copy_(entry[1][:channels])
        else:
            dst.running_mean.zero_()
            dst.running_var.fill_(1.0)


def extract_subnet(
    state: SupernetState,
    d: ArchDescriptor,
    branch: str = STUDENT,
) -> SubnetEncoder:
    """Materialize descriptor `d` as a standalone network.

    Weights are the sliced shared parameters; norm buffers come from the
    calibration cache when present (zeros/ones otherwise), so an eval-mode
    forward of the result reproduces `forward(state, branch, d, .)`.
    """
    state.space.require_valid(d)
    source = state.net(branch)
    stats = state.norm_cache.get((branch, d))
    subnet = SubnetEncoder(
        d,
        expansion=state.space.expansion,
        stem_plan=state.space.stem_plan,
        embed_dim=state.embed_dim,
        projection_hidden=source.projection_hidden,
    )
    with torch.no_grad():
        subnet.stem_conv.weight.copy_(source.stem_conv.weight[: d.stem_width, :3])
        _copy_bn(source.stem_bn, subnet.stem_bn, d.stem_width, stats)
        cin = d.stem_width
        for i in range(STAGE_COUNT):
            width = d.stage_widths[i]
            cout = width * state.space.expansion
            for b in range(d.stage_depths[i]):
                src = source.stages[i][b]
                dst = subnet.stages[i][b]
                dst.conv1.weight.copy_(src.conv1.weight[:width, :cin])
                _copy_bn(src.bn1, dst.bn1, width, stats)
                dst.conv2.weight.copy_(src.conv2.weight[:width, :width])
                _copy_bn(src.bn2, dst.bn2, width, stats)
                dst.conv3.weight.copy_(src.conv3.weight[:cout, :width])
                _copy_bn(src.bn3, dst.bn3, cout, stats)
                if b == 0:
                    dst.down_conv.weight.copy_(src.down_conv.weight[:cout, :cin])
                    _copy_bn(src.down_bn, dst.down_bn, cout, stats)
                cin = cout
        subnet.fc1.weight.copy_(source.fc1.weight[:, : subnet.c5_channels])
        subnet.fc1.bias.copy_(source.fc1.bias)
        subnet.fc2.weight.copy_(source.fc2.weight)
        subnet.fc2.bias.copy_(source.fc2.bias)
    subnet.eval()
    return subnet


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def save_subnet(path, subnet: SubnetEncoder) -> None:
    """Write an extracted subnet (weights plus norm buffers) as one container."""
    from .container import write_container

    meta = {
        "kind": "subnet",
        "descriptor": subnet.descriptor.to_dict(),
        "expansion": subnet.expansion,
        "stem_plan": subnet.stem_plan,
        "embed_dim": 0 if subnet.fc2 is None else subnet.fc2.out_features,
        "projection_hidden": subnet.projection_hidden,
        "head": subnet.head,
    }
    tensors = {
        name: value.detach().numpy() for name, value in subnet.state_dict().items()
    }
    write_container(path, meta, tensors)


def load_subnet(path) -> SubnetEncoder:
    """Rebuild a saved subnet; returns it in eval mode."""
    from .container import read_container

    meta, tensors = read_container(path)
    if meta.get("kind") != "subnet":
        raise ValueError(f"not a subnet container: kind={meta.get('kind')!r}")
    subnet = SubnetEncoder(
        ArchDescriptor.from_dict(meta["descriptor"]),
        expansion=meta["expansion"],
        stem_plan=meta["stem_plan"],
        embed_dim=meta["embed_dim"] or 128,
        projection_hidden=meta["projection_hidden"],
        head=meta["head"],
    )
    state_dict = {name: torch.from_numpy(value) for name, value in tensors.items()}
    subnet.load_state_dict(state_dict)
    subnet.eval()
    return subnet
