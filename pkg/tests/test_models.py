import numpy as np
import pytest
import torch

from fewgan.models import (DFM_MODES, GFM_MODES, Discriminator, GanArch, Generator,
                           ema_update, expand_trainable_mask, extend_embeddings)

TINY = GanArch(class_budget=6, image_size=8, n_blocks=2, width=8, z_dim=4, embed_dim=4)


@pytest.fixture(scope="module")
def gen():
    return Generator(TINY, init_seed=0)


@pytest.fixture(scope="module")
def disc():
    return Discriminator(TINY, init_seed=1)


def latent(n, seed=0):
    return torch.randn(n, TINY.z_dim, generator=torch.Generator().manual_seed(seed))


class TestGeneratorForward:
    def test_deterministic(self, gen):
        z, y = latent(3), torch.tensor([0, 1, 5])
        a, b = gen(z, y), gen(z, y)
        assert torch.equal(a, b)

    def test_output_range_and_shape(self, gen):
        x = gen(latent(4), torch.tensor([0, 1, 2, 3]))
        assert x.shape == (4, 1, 8, 8)
        assert x.min() >= -1.0 and x.max() <= 1.0

    def test_label_changes_output(self, gen):
        z = latent(1)
        a = gen(z, torch.tensor([0]))
        b = gen(z, torch.tensor([3]))
        assert not torch.equal(a, b)

    def test_identity_modulation_is_unconditional(self):
        g = Generator(TINY, init_seed=3)
        with torch.no_grad():
            for blk in g.blocks:
                blk.mod.weight.zero_()
                blk.mod.bias.zero_()
        za, zb = latent(1, 1), latent(1, 2)
        out = [g(z, torch.tensor([y])) for z in (za, zb) for y in (0, 4)]
        for other in out[1:]:
            assert torch.equal(out[0], other)

    def test_batch_size_independence(self, gen):
        z, y = latent(5), torch.tensor([0, 1, 2, 3, 4])
        full = gen(z, y)
        single = torch.cat([gen(z[i:i + 1], y[i:i + 1]) for i in range(5)])
        assert torch.allclose(full, single, atol=1e-6)

    def test_class_budget_enforced(self, gen):
        with pytest.raises(IndexError):
            gen(latent(1), torch.tensor([TINY.class_budget]))


class TestDiscriminatorForward:
    def test_projection_identity(self, gen, disc):
        z = latent(6, 3)
        y = torch.tensor([0, 1, 2, 3, 4, 5])
        x = gen(z, y)
        cond, uncond, _ = disc(x, y)
        feat = disc.features(x)
        proj = (disc.label_embed(y) * feat).sum(dim=1)
        assert torch.allclose(cond - uncond, proj, atol=1e-5)

    def test_zero_embedding_collapses_to_unconditional(self):
        d = Discriminator(TINY, init_seed=7)
        with torch.no_grad():
            d.label_embed.weight.zero_()
        x = torch.rand(3, 1, 8, 8) * 2 - 1
        for y in (torch.tensor([0, 0, 0]), torch.tensor([5, 1, 2])):
            cond, uncond, _ = d(x, y)
            assert torch.allclose(cond, uncond)

    def test_hand_set_projection_head(self):
        arch = GanArch(class_budget=3, image_size=8, n_blocks=2, width=8, z_dim=4,
                       embed_dim=4, feat_dim=4)
        d = Discriminator(arch, init_seed=0)
        v = torch.tensor([[1.0, 2.0, 3.0, 4.0],
                          [0.5, 0.5, 0.5, 0.5],
                          [2.0, -1.0, 0.0, 1.0]])
        with torch.no_grad():
            d.label_embed.weight.copy_(v)
            d.psi.weight.zero_()
            d.psi.bias.fill_(0.5)
        feat = torch.tensor([[1.0, 0.0, 2.0, -1.0]])
        cond, uncond, _ = d.heads(feat, torch.tensor([2]))
        # V[2] . (1, 0, 2, -1) + 0.5 = (2 + 0 + 0 - 1) + 0.5
        assert float(cond) == pytest.approx(1.5, abs=1e-6)
        assert float(uncond) == pytest.approx(0.5, abs=1e-6)

    def test_identical_embedding_rows_tie(self):
        d = Discriminator(TINY, init_seed=2)
        with torch.no_grad():
            d.label_embed.weight[4] = d.label_embed.weight[1]
        x = torch.rand(2, 1, 8, 8) * 2 - 1
        a, _, _ = d(x, torch.tensor([1, 1]))
        b, _, _ = d(x, torch.tensor([4, 4]))
        assert torch.equal(a, b)

    def test_z_prediction_shape(self, gen, disc):
        z = latent(4, 9)
        y = torch.tensor([0, 1, 2, 3])
        _, _, z_pred = disc(gen(z, y), y)
        assert z_pred.shape == (4, TINY.z_dim)

    def test_shape_mismatch(self, disc):
        with pytest.raises(ValueError):
            disc(torch.zeros(2, 1, 16, 16), torch.tensor([0, 1]))


class TestTrainableMask:
    def test_paper_mode_expansion(self):
        m = expand_trainable_mask("embed", "embed")
        assert m.d_groups == {"embed"} and m.g_groups == {"embed"}
        m = expand_trainable_mask("linear", "linear")
        assert m.d_groups == {"embed", "linear"}
        assert m.g_groups == {"embed", "linear"}
        m = expand_trainable_mask("all", "embed")
        assert m.d_groups == {"embed", "linear", "backbone"}
        assert m.g_groups == {"embed"}

    def test_monotone(self):
        assert DFM_MODES["embed"] < DFM_MODES["linear"] < DFM_MODES["all"]
        assert GFM_MODES["embed"] < GFM_MODES["linear"]

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            expand_trainable_mask("frozen", "embed")
        with pytest.raises(ValueError):
            expand_trainable_mask("all", "all")

    def test_group_partition_covers_all_parameters(self, gen, disc):
        for net in (gen, disc):
            groups = set(net.param_groups().values())
            assert groups <= {"backbone", "linear", "embed"}
        d_groups = disc.param_groups()
        assert d_groups["label_embed.weight"] == "embed"
        assert d_groups["dz.weight"] == "embed"
        assert d_groups["phi.weight"] == "linear"
        assert d_groups["psi.bias"] == "linear"
        assert d_groups["conv_in.weight"] == "backbone"
        g_groups = gen.param_groups()
        assert g_groups["h0"] == "backbone"
        assert g_groups["blocks.0.embed.weight"] == "embed"
        assert g_groups["blocks.0.mod.weight"] == "linear"


class TestExtendEmbeddings:
    def test_noop(self):
        g = Generator(TINY, init_seed=0)
        before = {n: p.clone() for n, p in g.named_parameters()}
        extend_embeddings(g, 0, init_seed=5)
        for n, p in g.named_parameters():
            assert torch.equal(p, before[n])

    def test_grow_38_to_47(self):
        arch = GanArch(class_budget=38, image_size=8, n_blocks=2, width=8, z_dim=4,
                       embed_dim=4)
        g = Generator(arch, init_seed=0)
        old = [blk.embed.weight.clone() for blk in g.blocks]
        extend_embeddings(g, 9, init_seed=11)
        assert g.arch.class_budget == 47
        for blk, before in zip(g.blocks, old):
            assert blk.embed.weight.shape[0] == 47
            assert torch.equal(blk.embed.weight[:38], before)

    def test_same_seed_same_rows(self):
        a, b = (Discriminator(TINY, init_seed=0) for _ in range(2))
        extend_embeddings(a, 3, init_seed=21)
        extend_embeddings(b, 3, init_seed=21)
        assert torch.equal(a.label_embed.weight, b.label_embed.weight)

    def test_forward_unchanged_on_old_classes(self):
        g = Generator(TINY, init_seed=4)
        z, y = latent(2, 8), torch.tensor([0, 5])
        before = g(z, y)
        extend_embeddings(g, 4, init_seed=3)
        assert torch.equal(g(z, y), before)

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            extend_embeddings(Generator(TINY), -1, 0)


class TestEmaUpdate:
    def test_decay_zero_copies(self):
        a, b = Generator(TINY, 0), Generator(TINY, 1)
        ema_update(a, b, 0.0)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_scalar_probe(self):
        a, b = Discriminator(TINY, 0), Discriminator(TINY, 1)
        with torch.no_grad():
            a.psi.bias.fill_(0.0)
            b.psi.bias.fill_(1.0)
        ema_update(a, b, 0.999)
        assert float(a.psi.bias) == pytest.approx(0.001, rel=1e-6)

    def test_geometric_convergence(self):
        ema, target = Generator(TINY, 0), Generator(TINY, 1)
        decay = 0.9
        gap0 = float((ema.h0 - target.h0).abs().max())
        for step in range(1, 6):
            ema_update(ema, target, decay)
            gap = float((ema.h0 - target.h0).abs().max())
            assert gap == pytest.approx(gap0 * decay ** step, rel=1e-4)

    def test_invalid_decay(self):
        with pytest.raises(ValueError):
            ema_update(Generator(TINY), Generator(TINY), 1.0)


class TestInitDeterminism:
    def test_same_seed_same_params(self):
        a, b = Generator(TINY, init_seed=12), Generator(TINY, init_seed=12)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_different_seed_differs(self):
        a, b = Generator(TINY, init_seed=0), Generator(TINY, init_seed=1)
        assert not torch.equal(a.h0, b.h0)

    def test_arch_validation(self):
        with pytest.raises(ValueError):
            GanArch(class_budget=4, image_size=10, n_blocks=3)
        with pytest.raises(ValueError):
            GanArch(class_budget=0, image_size=8, n_blocks=2)
