import math

import numpy as np
import pytest
import torch

from brainalign.corpus import SectionPair
from brainalign.text_encoder import (
    EncoderConfig,
    MlmHead,
    TextEncoder,
    TextEncoderError,
    cosine,
    embed_report,
    encode_tokens,
    load_checkpoint,
    mask_tokens,
    mean_pool,
    mlm_batch_loss,
    mlm_loss,
    pair_cosines,
    rsm_loss,
    save_checkpoint,
    section_tokens,
    train_mlm,
    train_rsm,
    warmup_lr,
)
from brainalign.tokenizer import (
    MASK_ID,
    TokenSequence,
    encode,
    pack_blocks,
    train_wordpiece,
)

TEXTS = [
    "there is a small haemorrhage in the left frontal lobe",
    "no haemorrhage is seen on this scan today",
    "the ventricles are normal in size for age",
    "restricted diffusion in keeping with an acute infarct",
    "there are normal intracranial appearances",
    "a large mass lesion with surrounding oedema is present",
] * 6


@pytest.fixture(scope="module")
def vocab():
    return train_wordpiece(TEXTS, vocab_size=300, min_frequency=3)


@pytest.fixture(scope="module")
def micro_cfg(vocab):
    return EncoderConfig(vocab_size=len(vocab), n_layers=2, n_heads=2,
                         hidden_dim=16, embed_dim=16, block_length=32)


def fd_gradient(loss_fn, param, eps=1e-5):
    """Central finite differences w.r.t. each entry of `param`."""
    grad = torch.zeros_like(param)
    flat = param.data.view(-1)
    gflat = grad.view(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        hi = loss_fn().item()
        flat[i] = orig - eps
        lo = loss_fn().item()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b):
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)
    return np.abs(a - b) / denom


class TestEncodeTokens:
    def test_output_shape(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        seq = encode("the ventricles are normal", vocab)
        out = encode_tokens(model, seq)
        assert out.shape == (len(seq), micro_cfg.embed_dim)

    def test_deterministic_inference(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        seq = encode("no haemorrhage is seen", vocab)
        assert np.array_equal(encode_tokens(model, seq), encode_tokens(model, seq))

    def test_position_sensitivity(self, vocab, micro_cfg):
        torch.manual_seed(1)
        model = TextEncoder(micro_cfg)
        seq = encode("the ventricles are normal", vocab)
        swapped_ids = list(seq.token_ids)
        swapped_ids[0], swapped_ids[1] = swapped_ids[1], swapped_ids[0]
        swapped = TokenSequence(swapped_ids, list(seq.tokens), list(seq.attention_mask))
        assert not np.allclose(encode_tokens(model, seq), encode_tokens(model, swapped))

    def test_overlong_sequence_rejected(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        ids = [6] * (micro_cfg.block_length + 1)
        seq = TokenSequence(ids, ["x"] * len(ids), [1] * len(ids))
        with pytest.raises(TextEncoderError, match="truncation required"):
            encode_tokens(model, seq)

    def test_config_validation(self):
        with pytest.raises(TextEncoderError):
            EncoderConfig(vocab_size=10, n_heads=3, hidden_dim=16)


class TestMaskTokens:
    def make_block(self, vocab, n=128):
        return TokenSequence([6] * n, ["x"] * n, [1] * n)

    def test_masked_positions_contain_mask_id(self, vocab):
        rng = np.random.default_rng(0)
        batch = mask_tokens(self.make_block(vocab), 0.15, rng)
        for tid, is_masked in zip(batch.input_ids, batch.mask_positions):
            if is_masked:
                assert tid == MASK_ID

    def test_low_rate_limit(self, vocab):
        rng = np.random.default_rng(1)
        batch = mask_tokens(self.make_block(vocab), 1e-9, rng)
        assert sum(batch.mask_positions) == 0

    def test_monte_carlo_mean(self, vocab):
        # 128 eligible positions at rate 0.15 -> expect 19.2 masked
        rng = np.random.default_rng(2)
        block = self.make_block(vocab, 128)
        counts = [sum(mask_tokens(block, 0.15, rng).mask_positions) for _ in range(10_000)]
        assert abs(np.mean(counts) - 19.2) < 0.5

    def test_specials_and_pads_never_masked(self, vocab):
        rng = np.random.default_rng(3)
        seq = TokenSequence([2, 6, 6, 3, 0, 0], ["<cls>", "x", "x", "<sep>", "<pad>", "<pad>"],
                            [1, 1, 1, 1, 0, 0])
        for _ in range(50):
            batch = mask_tokens(seq, 0.9, rng)
            assert not batch.mask_positions[0]
            assert not batch.mask_positions[3]
            assert not any(batch.mask_positions[4:])

    def test_bad_rate_rejected(self, vocab):
        with pytest.raises(TextEncoderError):
            mask_tokens(self.make_block(vocab), 0.0, np.random.default_rng(0))


class TestMlmLoss:
    def test_untrained_loss_near_log_vocab(self, vocab):
        cfg = EncoderConfig(vocab_size=10_000, n_layers=2, n_heads=2,
                            hidden_dim=32, embed_dim=32, block_length=32)
        torch.manual_seed(0)
        model, head = TextEncoder(cfg), MlmHead(cfg)
        seq = TokenSequence([7] * 32, ["x"] * 32, [1] * 32)
        batch = mask_tokens(seq, 0.3, np.random.default_rng(0))
        with torch.no_grad():
            loss = float(mlm_batch_loss(model, head, batch))
        assert abs(loss - math.log(10_000)) < 0.02 * math.log(10_000)
        assert loss >= 0

    def test_zero_masked_positions_rejected(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model, head = TextEncoder(micro_cfg), MlmHead(micro_cfg)
        seq = TokenSequence([6, 7], ["a", "b"], [1, 1])
        batch = mask_tokens(seq, 1e-12, np.random.default_rng(0))
        with pytest.raises(TextEncoderError):
            mlm_batch_loss(model, head, batch)

    def test_gradients_match_finite_differences(self, vocab):
        cfg = EncoderConfig(vocab_size=40, n_layers=2, n_heads=2,
                            hidden_dim=8, embed_dim=8, block_length=12)
        torch.manual_seed(4)
        model, head = TextEncoder(cfg).double(), MlmHead(cfg).double()
        model.eval()
        head.eval()
        ids = torch.tensor([[2, 7, 8, 9, 10, 3]], dtype=torch.long)
        attn = torch.ones_like(ids)
        positions = torch.tensor([[False, True, False, True, False, False]])
        loss_fn = lambda: mlm_loss(model, head, ids, attn, ids, positions)

        loss = loss_fn()
        params = dict(model.named_parameters())
        check = ["blocks.0.attn.in_proj_weight", "blocks.1.ff.0.weight", "tok_emb.weight"]
        grads = torch.autograd.grad(loss, [params[n] for n in check])
        for name, analytic in zip(check, grads):
            numeric = fd_gradient(loss_fn, params[name])
            # sample entries with appreciable gradient mass
            a, n = analytic.detach().numpy().ravel(), numeric.numpy().ravel()
            mask = np.abs(n) > 1e-9
            assert mask.any()
            assert rel_err(a[mask], n[mask]).max() <= 1e-4, name


class TestTrainMlm:
    def make_blocks(self, vocab):
        stream = []
        for t in TEXTS:
            stream.extend(encode(t, vocab).token_ids)
        return pack_blocks(stream, 32, vocab=vocab)

    def test_loss_decreases_and_best_checkpoint(self, vocab, micro_cfg):
        blocks = self.make_blocks(vocab)
        state = train_mlm(blocks[:8], blocks[8:10], micro_cfg, epochs=8, batch_size=4,
                          lr=3e-3, seed=0)
        first_train = state.history[0][0]
        assert min(h[0] for h in state.history) < first_train
        assert state.best_val_loss == min(h[1] for h in state.history)

    def test_seeded_reproducibility(self, vocab, micro_cfg):
        blocks = self.make_blocks(vocab)
        a = train_mlm(blocks[:6], blocks[6:8], micro_cfg, epochs=3, batch_size=4, seed=11)
        b = train_mlm(blocks[:6], blocks[6:8], micro_cfg, epochs=3, batch_size=4, seed=11)
        assert a.history == b.history

    def test_empty_data_rejected(self, vocab, micro_cfg):
        with pytest.raises(TextEncoderError):
            train_mlm([], [], micro_cfg)


class TestMeanPoolCosine:
    def test_two_position_mean(self):
        emb = np.array([[1.0, 3.0], [3.0, 5.0]])
        assert np.allclose(mean_pool(emb, [1, 1]), [2.0, 4.0])

    def test_single_position_identity(self):
        emb = np.array([[7.0, -2.0]])
        assert np.allclose(mean_pool(emb, [1]), [7.0, -2.0])

    def test_pads_excluded(self):
        emb = np.array([[1.0, 3.0], [3.0, 5.0], [99.0, 99.0]])
        assert np.allclose(mean_pool(emb, [1, 1, 0]), [2.0, 4.0])

    def test_all_pad_rejected(self):
        with pytest.raises(TextEncoderError):
            mean_pool(np.zeros((2, 3)), [0, 0])

    def test_linearity(self):
        rng = np.random.default_rng(5)
        a, b = rng.random((4, 8)), rng.random((4, 8))
        mask = [1, 0, 1, 1]
        assert np.allclose(mean_pool(a + b, mask), mean_pool(a, mask) + mean_pool(b, mask))

    def test_cosine_identities(self):
        rng = np.random.default_rng(6)
        v, w = rng.random(16) - 0.5, rng.random(16) - 0.5
        assert cosine(v, v) == pytest.approx(1.0)
        assert cosine(v, -v) == pytest.approx(-1.0)
        assert cosine(v, 3.7 * w) == pytest.approx(cosine(v, w))
        with pytest.raises(TextEncoderError):
            cosine(v, np.zeros(16))


class TestRsm:
    def make_pairs(self, n=8):
        pairs = []
        for i in range(n):
            pairs.append(SectionPair(
                findings_text=TEXTS[i % len(TEXTS)],
                summary_text=TEXTS[(i + 1) % len(TEXTS)],
                label=i % 2,
                findings_report_id=f"r{i}",
                summary_report_id=f"r{i if i % 2 else i + 1}",
            ))
        return pairs

    def test_loss_zero_when_cosine_equals_label(self):
        # cosine(v, v) = 1 with label 1 gives zero loss
        sims = torch.tensor([1.0, 0.0])
        labels = torch.tensor([1.0, 0.0])
        assert float(((sims - labels) ** 2).mean()) == 0.0

    def test_loss_one_when_orthogonal_true_pair(self):
        sims = torch.tensor([0.0])
        labels = torch.tensor([1.0])
        assert float(((sims - labels) ** 2).mean()) == 1.0

    def test_branches_must_share_module(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        other = TextEncoder(micro_cfg)
        with pytest.raises(TextEncoderError):
            rsm_loss(model, vocab, self.make_pairs(2), second_branch=other)

    def test_gradient_through_both_branches(self, vocab):
        cfg = EncoderConfig(vocab_size=len(vocab), n_layers=1, n_heads=2,
                            hidden_dim=8, embed_dim=8, block_length=32)
        torch.manual_seed(7)
        model = TextEncoder(cfg).double()
        model.eval()
        pairs = self.make_pairs(2)
        loss_fn = lambda: rsm_loss(model, vocab, pairs, second_branch=model)

        param = dict(model.named_parameters())["blocks.0.ff.0.weight"]
        (analytic,) = torch.autograd.grad(loss_fn(), [param])
        numeric = fd_gradient(loss_fn, param)
        a, n = analytic.detach().numpy().ravel(), numeric.numpy().ravel()
        mask = np.abs(n) > 1e-9
        assert rel_err(a[mask], n[mask]).max() <= 1e-4

        # detaching one branch changes the gradient: both branches contribute
        f_loss = rsm_loss(model, vocab, pairs, second_branch=model)
        (full_grad,) = torch.autograd.grad(f_loss, [param])
        assert not torch.allclose(full_grad, torch.zeros_like(full_grad))

    def test_warmup_schedule(self):
        assert warmup_lr(1e-6, 50, 100) == pytest.approx(0.5e-6)
        assert warmup_lr(1e-6, 100, 100) == pytest.approx(1e-6)
        assert warmup_lr(1e-6, 500, 100) == pytest.approx(1e-6)

    def test_train_rsm_runs_and_warns_without_mlm(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        pairs = self.make_pairs(8)
        with pytest.warns(UserWarning, match="without MLM"):
            state = train_rsm(pairs[:6], pairs[6:], model, vocab, epochs=2,
                              batch_size=4, lr=1e-4, warmup_steps=5, seed=0)
        assert state.best_val_loss == min(h[1] for h in state.history)
        assert len(pair_cosines(model, vocab, pairs)) == len(pairs)


class TestEmbedReport:
    def test_single_window_equals_manual_pool(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        text = "the ventricles are normal in size"
        ids, attn, pool = section_tokens(text, vocab, micro_cfg.block_length)
        seq = TokenSequence(ids, [vocab.tokens[i] for i in ids], attn)
        manual = mean_pool(encode_tokens(model, seq), pool)
        assert np.allclose(embed_report(text, model, vocab), manual, atol=1e-6)

    def test_deterministic(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        text = "restricted diffusion in keeping with an acute infarct"
        assert np.array_equal(embed_report(text, model, vocab),
                              embed_report(text, model, vocab))

    def test_long_report_multi_window(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        long_text = " ".join(TEXTS)
        vec = embed_report(long_text, model, vocab)
        assert vec.shape == (micro_cfg.embed_dim,)
        assert np.linalg.norm(vec) > 0

    def test_paper_profile_dimensionality(self, vocab):
        cfg = EncoderConfig(vocab_size=len(vocab), n_layers=1, n_heads=12,
                            hidden_dim=768, embed_dim=768, block_length=128)
        torch.manual_seed(0)
        model = TextEncoder(cfg)
        vec = embed_report("there are normal intracranial appearances", model, vocab)
        assert vec.shape == (768,)

    def test_empty_rejected(self, vocab, micro_cfg):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        with pytest.raises(TextEncoderError):
            embed_report("   ", model, vocab)


class TestCheckpoint:
    def test_roundtrip(self, vocab, micro_cfg, tmp_path):
        torch.manual_seed(0)
        model = TextEncoder(micro_cfg)
        model.mlm_trained = True
        head = MlmHead(micro_cfg)
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, model, vocab, head=head, extras={"stage": "mlm"})
        loaded, loaded_vocab, loaded_head, extras = load_checkpoint(path)
        assert loaded_vocab.tokens == vocab.tokens
        assert loaded.mlm_trained
        assert extras == {"stage": "mlm"}
        text = "no haemorrhage is seen"
        assert np.allclose(embed_report(text, model, vocab),
                           embed_report(text, loaded, loaded_vocab))
