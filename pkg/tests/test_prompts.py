import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from promptmil import autodiff as ad
from promptmil import numerics, prompts
from promptmil.errors import (
    ConfigurationError,
    ContractViolationError,
    DegenerateInputError,
    VocabularyError,
)

DESCRIPTIONS = Path(prompts.__file__).parent / "descriptions"


@pytest.fixture()
def vocab():
    v = prompts.Vocabulary(seed=3, dim=16)
    v.add_text("an image patch of tumor cells with large nuclei")
    return v


@pytest.fixture()
def text_enc():
    return prompts.text_encoder(seed=3, word_dim=16, feature_dim=8)


def make_group(vocab, m_tokens, descriptive, class_text, level="instance", polarity="positive", seed=0):
    return prompts.PromptGroup(
        learnable=prompts._seeded_uniform(seed, f"{level}-context", (m_tokens, vocab.dim)),
        descriptive_tokens=vocab.add_text(descriptive),
        class_tokens=vocab.add_text(class_text),
        level=level,
        tag=class_text,
        polarity=polarity if level == "instance" else None,
    )


class TestVocabulary:
    def test_embedding_independent_of_insertion_order(self):
        a = prompts.Vocabulary(seed=1, dim=8)
        a.add("nuclei")
        a.add("stroma")
        b = prompts.Vocabulary(seed=1, dim=8)
        b.add("stroma")
        b.add("nuclei")
        np.testing.assert_array_equal(a.rows([a.id_of("nuclei")]), b.rows([b.id_of("nuclei")]))

    def test_different_seeds_differ(self):
        a = prompts.Vocabulary(seed=1, dim=8)
        b = prompts.Vocabulary(seed=2, dim=8)
        assert not np.array_equal(a.rows([a.add("nuclei")]), b.rows([b.add("nuclei")]))

    def test_frozen_rejects_new_tokens(self):
        v = prompts.Vocabulary(seed=1, dim=8)
        v.add("known")
        v.freeze()
        assert v.add("known") == 0
        with pytest.raises(VocabularyError, match="mystery"):
            v.add("mystery")

    def test_unknown_lookup_names_token(self):
        v = prompts.Vocabulary(seed=1, dim=8)
        with pytest.raises(VocabularyError, match="never-seen"):
            v.id_of("never-seen")

    def test_rows_are_read_only(self, vocab):
        row = vocab.rows([0])
        with pytest.raises(ValueError):
            vocab._rows[0][0] = 99.0
        assert row is not None


class TestAssemblePrompt:
    def test_degenerate_single_token(self, vocab):
        g = make_group(vocab, 0, "", "tumor")
        seq = prompts.assemble_prompt(g, vocab)
        assert seq.shape == (1, vocab.dim)

    def test_length_arithmetic(self, vocab):
        g = make_group(vocab, 10, "a b c d e", "w x y z")
        assert prompts.assemble_prompt(g, vocab).shape == (19, vocab.dim)

    def test_deterministic(self, vocab):
        g = make_group(vocab, 4, "large nuclei", "tumor cells")
        np.testing.assert_array_equal(
            prompts.assemble_prompt(g, vocab), prompts.assemble_prompt(g, vocab)
        )

    def test_order_is_learnable_descriptive_class(self, vocab):
        g = make_group(vocab, 2, "large", "tumor")
        seq = prompts.assemble_prompt(g, vocab)
        np.testing.assert_array_equal(seq[:2], g.learnable)
        np.testing.assert_array_equal(seq[2], vocab.rows([vocab.id_of("large")])[0])
        np.testing.assert_array_equal(seq[3], vocab.rows([vocab.id_of("tumor")])[0])

    def test_unknown_token_id_rejected(self, vocab):
        g = make_group(vocab, 0, "", "tumor")
        g.class_tokens = [9999]
        with pytest.raises(VocabularyError, match="9999"):
            prompts.assemble_prompt(g, vocab)


class TestEncodeText:
    def test_single_token_is_projected_and_normalized(self, vocab, text_enc):
        g = make_group(vocab, 0, "", "tumor")
        seq = prompts.assemble_prompt(g, vocab)
        expected = seq[0] @ text_enc.projection
        expected = expected / np.linalg.norm(expected)
        np.testing.assert_allclose(prompts.encode_text(seq, text_enc), expected, atol=1e-15)

    def test_duplicating_tokens_is_identity(self, vocab, text_enc):
        g = make_group(vocab, 3, "large nuclei", "tumor cells")
        seq = prompts.assemble_prompt(g, vocab)
        doubled = np.concatenate([seq, seq], axis=0)
        np.testing.assert_allclose(
            prompts.encode_text(seq, text_enc), prompts.encode_text(doubled, text_enc), atol=1e-12
        )

    def test_norms_are_one(self, text_enc):
        rng = np.random.default_rng(0)
        for _ in range(1000):
            seq = rng.normal(size=(int(rng.integers(1, 12)), 16))
            v = prompts.encode_text(seq, text_enc)
            assert abs(np.linalg.norm(v) - 1.0) < 1e-9

    def test_empty_sequence_rejected(self, text_enc):
        with pytest.raises(DegenerateInputError):
            prompts.encode_text(np.zeros((0, 16)), text_enc)

    def test_zero_vector_rejected(self, text_enc):
        with pytest.raises(DegenerateInputError):
            prompts.encode_text(np.zeros((2, 16)), text_enc)

    def test_graph_matches_plain_encoding(self, vocab, text_enc):
        g = make_group(vocab, 3, "large nuclei", "tumor cells")
        plain = prompts.encode_text(prompts.assemble_prompt(g, vocab), text_enc)
        node = prompts.encode_text_graph(g, vocab, text_enc, ad.leaf(g.learnable))
        np.testing.assert_array_equal(node.value[0], plain)

    def test_gradient_wrt_learnable_tokens(self, vocab, text_enc):
        g = make_group(vocab, 3, "large nuclei", "tumor cells")
        rng = np.random.default_rng(1)
        w = rng.normal(size=(text_enc.feature_dim, 1))
        shape = g.learnable.shape

        def f(flat):
            ctx = ad.leaf(flat.reshape(shape))
            out = ad.matmul(prompts.encode_text_graph(g, vocab, text_enc, ctx), ad.constant(w))
            out.backward()
            return out.item(), ctx.grad.ravel().copy()

        assert numerics.grad_check(f, g.learnable.ravel(), eps=1e-5) < 1e-5


class TestEncodeImage:
    def test_precomputed_normalizes(self):
        enc = prompts.image_encoder(feature_dim=2)
        np.testing.assert_allclose(prompts.encode_image([3.0, 4.0], enc), [0.6, 0.8])

    def test_deterministic(self):
        enc = prompts.image_encoder(feature_dim=4)
        raw = np.array([0.1, -2.0, 3.0, 0.5])
        np.testing.assert_array_equal(prompts.encode_image(raw, enc), prompts.encode_image(raw, enc))

    def test_toy_projection_of_basis_vector(self):
        enc = prompts.image_encoder(feature_dim=4, seed=9, kind="toy-projection", raw_dim=6)
        e2 = np.zeros(6)
        e2[2] = 1.0
        expected = enc.projection[2] / np.linalg.norm(enc.projection[2])
        np.testing.assert_allclose(prompts.encode_image(e2, enc), expected, atol=1e-15)

    def test_dimension_mismatch(self):
        enc = prompts.image_encoder(feature_dim=4)
        with pytest.raises(ContractViolationError):
            prompts.encode_image([1.0, 2.0], enc)


class TestLibraryAndPrototypes:
    def test_build_prototypes_two_groups(self, vocab, text_enc):
        groups = [
            make_group(vocab, 2, "large nuclei", "tumor"),
            make_group(vocab, 2, "an image patch", "cells", polarity="negative"),
        ]
        protos = prompts.build_prototypes(groups, vocab, text_enc)
        assert protos.P.shape == (2, 8)
        np.testing.assert_allclose(np.linalg.norm(protos.P, axis=1), 1.0, atol=1e-9)
        assert protos.positive_indices == [0]

    def test_identical_groups_give_identical_rows(self, vocab, text_enc):
        g1 = make_group(vocab, 2, "large nuclei", "tumor")
        g2 = prompts.PromptGroup(
            learnable=g1.learnable,  # shared
            descriptive_tokens=list(g1.descriptive_tokens),
            class_tokens=list(g1.class_tokens),
            level="instance",
            tag=g1.tag,
            polarity="positive",
        )
        protos = prompts.build_prototypes([g1, g2], vocab, text_enc)
        np.testing.assert_array_equal(protos.P[0], protos.P[1])

    def test_paper_scale_26_prototypes(self):
        lib = prompts.load_prompt_library(
            DESCRIPTIONS / "tumor_detection", feature_dim=32, encoder_seed=0, word_dim=64
        )
        groups = lib.make_groups(m_tokens=10, seed=1)
        protos = prompts.build_prototypes(groups, lib.vocab, lib.text_enc)
        assert protos.P.shape == (26, 32)

    def test_library_loads_and_orders_classes(self):
        lib = prompts.load_prompt_library(
            DESCRIPTIONS / "synthetic", feature_dim=8, encoder_seed=0, word_dim=32
        )
        assert lib.class_names == ["background tissue", "target lesion"]
        groups = lib.make_groups(m_tokens=4, seed=0)
        weights = prompts.bag_class_weights(groups, lib.vocab, lib.text_enc)
        assert weights.B.shape == (2, 8)
        assert weights.tags == ("background tissue", "target lesion")

    def test_instance_context_shared_and_bag_contexts_class_specific(self):
        lib = prompts.load_prompt_library(
            DESCRIPTIONS / "synthetic", feature_dim=8, encoder_seed=0, word_dim=32
        )
        groups = lib.make_groups(m_tokens=4, seed=0)
        inst = [g for g in groups if g.level == "instance"]
        bag = [g for g in groups if g.level == "bag"]
        assert all(g.learnable is inst[0].learnable for g in inst)
        assert len({id(g.learnable) for g in bag}) == len(bag)
        assert all(g.learnable is not inst[0].learnable for g in bag)
        assert not np.array_equal(bag[0].learnable, bag[1].learnable)

    def test_coop_mode_empties_bag_descriptions_only(self):
        lib = prompts.load_prompt_library(
            DESCRIPTIONS / "synthetic", feature_dim=8, encoder_seed=0, word_dim=32
        )
        groups = lib.make_groups(m_tokens=4, seed=0, bag_prompt_mode="coop")
        for g in groups:
            if g.level == "bag":
                assert g.descriptive_tokens == []
            else:
                assert g.descriptive_tokens

    def test_header_validation(self, tmp_path):
        bad = tmp_path / "bad.txt"
        bad.write_text("level=instance; tag=x; polarity=maybe\na patch of [CLASS]\n")
        with pytest.raises(ConfigurationError, match="polarity"):
            prompts.parse_description_file(bad)
        bad.write_text("level=instance; tag=x; polarity=positive\na patch without placeholder\n")
        with pytest.raises(ConfigurationError, match=r"\[CLASS\]"):
            prompts.parse_description_file(bad)

    def test_encoder_restart_determinism(self):
        """Same seed must give byte-identical encoders in a fresh process."""
        snippet = (
            "from promptmil import prompts; import hashlib;"
            "e = prompts.text_encoder(7, 32, 8);"
            "v = prompts.Vocabulary(7, 32); v.add_text('tumor cells with nuclei');"
            "print(hashlib.sha256(e.projection.tobytes() + v.table().tobytes()).hexdigest())"
        )
        runs = {
            subprocess.run(
                [sys.executable, "-c", snippet], capture_output=True, text=True, check=True
            ).stdout.strip()
            for _ in range(2)
        }
        assert len(runs) == 1


class TestFrozenFingerprint:
    def test_fingerprint_ignores_learnable_and_sees_fixed(self):
        lib = prompts.load_prompt_library(
            DESCRIPTIONS / "synthetic", feature_dim=8, encoder_seed=0, word_dim=32
        )
        groups = lib.make_groups(m_tokens=4, seed=0)
        before = prompts.frozen_fingerprint(lib.vocab, lib.text_enc, lib.image_enc, groups)
        groups[0].learnable += 0.5  # training only ever touches this
        after = prompts.frozen_fingerprint(lib.vocab, lib.text_enc, lib.image_enc, groups)
        assert before == after
        groups[0].descriptive_tokens.append(0)
        assert prompts.frozen_fingerprint(lib.vocab, lib.text_enc, lib.image_enc, groups) != before
