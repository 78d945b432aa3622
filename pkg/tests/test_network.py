import numpy as np
import pytest
import torch

from vfisr.frames import resize_array
from vfisr.network import (
    CHECKPOINT_MAGIC,
    MultiScaleNet,
    NetworkConfig,
    build_network,
    build_pyramid,
    init_parameters,
    load_checkpoint,
    save_checkpoint,
    split_frames,
)


def small(**kw):
    base = dict(base_channels=4, unet_depth=2)
    base.update(kw)
    return NetworkConfig(**base)


def rand_stack(b, c, h, w, seed=0):
    return torch.rand(b, c, h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_pyramid_sizes_and_flow_scaling():
    st = torch.zeros(1, 29, 96, 96, dtype=torch.float64)
    st[:, :9] = 0.5
    st[:, 9] = 4.0  # x displacement of the first half flow
    levels = build_pyramid(st)
    assert [tuple(l.shape[-2:]) for l in levels] == [(24, 24), (48, 48), (96, 96)]
    torch.testing.assert_close(levels[0][:, :9], torch.full_like(levels[0][:, :9], 0.5))
    torch.testing.assert_close(levels[0][:, 9], torch.full_like(levels[0][:, 9], 1.0))
    torch.testing.assert_close(levels[1][:, 9], torch.full_like(levels[1][:, 9], 2.0))
    assert torch.equal(levels[2], st)


def test_pyramid_frames_match_bicubic():
    st = rand_stack(1, 9, 16, 16)
    lvl1 = build_pyramid(st)[0][0].numpy().transpose(1, 2, 0)
    np.testing.assert_allclose(lvl1, resize_array(st[0].numpy().transpose(1, 2, 0), (4, 4)), atol=1e-12)


def test_pyramid_rejects_indivisible():
    with pytest.raises(ValueError):
        build_pyramid(torch.zeros(1, 9, 10, 12))


@pytest.mark.parametrize("channels", [9, 17, 29])
def test_forward_shapes(channels):
    net = build_network(small(input_channels=channels), seed=0, dtype=torch.float64)
    outs = net(build_pyramid(rand_stack(2, channels, 16, 16)))
    assert [tuple(o.shape) for o in outs] == [(2, 9, 8, 8), (2, 9, 16, 16), (2, 9, 32, 32)]
    assert net.levels[1].inc[0].in_channels == channels + 9
    assert split_frames(outs[-1]).shape == (2, 3, 3, 32, 32)


def test_paper_size_geometry():
    net = build_network(NetworkConfig(base_channels=2), seed=0)
    outs = net(build_pyramid(torch.rand(1, 29, 96, 96)))
    assert [tuple(o.shape[-2:]) for o in outs] == [(48, 48), (96, 96), (192, 192)]


def test_single_scale():
    net = build_network(small(levels=1), seed=0)
    assert net.level_ids == [3]
    (out,) = net(build_pyramid(torch.rand(1, 29, 8, 8), 1))
    assert out.shape == (1, 9, 16, 16)


def test_forward_is_deterministic_and_seeded():
    x = build_pyramid(rand_stack(1, 29, 16, 16))
    a = build_network(small(), seed=3, dtype=torch.float64).eval()
    b = build_network(small(), seed=3, dtype=torch.float64).eval()
    assert all(torch.equal(p, q) for p, q in zip(a.state_dict().values(), b.state_dict().values()))
    with torch.no_grad():
        assert all(torch.equal(u, v) for u, v in zip(a(x), a(x)))
    c = build_network(small(), seed=4)
    assert not torch.equal(a.levels[0].inc[0].weight.float(), c.levels[0].inc[0].weight)


def test_shape_errors_name_the_level():
    net = build_network(small(), seed=0)
    x = build_pyramid(torch.rand(1, 29, 16, 16))
    with pytest.raises(ValueError, match="level 2"):
        net([x[0], torch.rand(1, 17, 8, 8), x[2]])
    with pytest.raises(ValueError, match="level 3"):
        net([x[0], x[1], torch.rand(1, 29, 12, 12)])
    with pytest.raises(ValueError):
        net(x[:2])


def test_xavier_variance_and_zero_bias():
    net = init_parameters(MultiScaleNet(NetworkConfig(base_channels=16)), seed=0)
    checked = 0
    for m in net.modules():
        if isinstance(m, torch.nn.Conv2d):
            assert not m.bias.any()
            if m.weight.numel() >= 1000:
                fan_in = m.weight.shape[1] * 9
                fan_out = m.weight.shape[0] * 9
                target = 2.0 / (fan_in + fan_out)
                assert abs(m.weight.var().item() / target - 1) < 0.2
                checked += 1
    assert checked > 10


def test_every_parameter_gets_gradient():
    net = build_network(small(), seed=0, dtype=torch.float64)
    outs = net(build_pyramid(rand_stack(1, 29, 16, 16)))
    sum(w * o.pow(2).mean() for w, o in zip((4, 2, 1), outs)).backward()
    for name, p in net.named_parameters():
        assert p.grad is not None and p.grad.abs().sum() > 0, name


def test_residual_zero_head_starts_at_base():
    cfg = small(residual=True, zero_head=True, input_channels=9, levels=1)
    net = build_network(cfg, seed=0, dtype=torch.float64)
    st = rand_stack(1, 9, 8, 8)
    (out,) = net([st])
    # naive estimate: neighbour averages at the ends, centre frame in the middle, bicubic x2
    base = torch.cat([0.5 * (st[:, 0:3] + st[:, 3:6]), st[:, 3:6], 0.5 * (st[:, 3:6] + st[:, 6:9])], 1).numpy()
    ref = resize_array(base[0].transpose(1, 2, 0), (16, 16)).transpose(2, 0, 1)
    np.testing.assert_allclose(out[0].detach().numpy(), ref, atol=1e-12)
    with pytest.raises(ValueError):
        NetworkConfig(zero_head=True)


def test_config_validation():
    for bad in (dict(levels=2), dict(input_channels=10), dict(activation="tanh"), dict(base_channels=0)):
        with pytest.raises(ValueError):
            NetworkConfig(**bad)


def test_checkpoint_round_trip(tmp_path):
    net = build_network(small(), seed=1, dtype=torch.float64)
    path = tmp_path / "ck.pt"
    save_checkpoint(path, net, step=7, epoch=2, extra={"note": 1})
    back, payload = load_checkpoint(path)
    assert payload["magic"] == CHECKPOINT_MAGIC == "FISR1"
    assert payload["step"] == 7 and payload["extra"] == {"note": 1}
    assert back.config == net.config
    x = build_pyramid(rand_stack(1, 29, 16, 16))
    with torch.no_grad():
        assert torch.equal(back.eval()(x)[-1], net.eval()(x)[-1])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.pt"
    torch.save({"magic": "NOPE"}, path)
    with pytest.raises(ValueError):
        load_checkpoint(path)
