import hashlib

import numpy as np
import pytest

from disenbooth.encoders import (ImageEncoder, InputError, PromptLengthError, TextEncoder, Vocabulary,
                                 VocabularyError, codec_decode, codec_encode, tokenize)
from disenbooth.synthbench import SceneSpec, SubjectSpec, render


@pytest.fixture(scope="module")
def vocab():
    return Vocabulary.load()


@pytest.fixture(scope="module")
def text(vocab):
    return TextEncoder(vocab)


@pytest.fixture(scope="module")
def image_encoder():
    return ImageEncoder()


def test_vocabulary_file_is_canonical(vocab):
    assert vocab.id("<pad>") == 0
    assert vocab.id("a") == 1 and vocab.id("S*") == 2 and vocab.id("V*") == 3
    assert Vocabulary(vocab.dumps().split()).tokens == vocab.tokens
    assert len(set(vocab.tokens)) == len(vocab)


def test_tokenize_subject_prompt(vocab):
    assert tokenize("a S* square", vocab) == [1, 2, vocab.id("square"), 0, 0, 0, 0, 0]
    assert tokenize("", vocab) == [0] * 8
    assert tokenize("a S* square", vocab) == tokenize("a S* square", vocab)


def test_tokenize_errors(vocab):
    with pytest.raises(VocabularyError, match="dog"):
        tokenize("a S* dog", vocab)
    with pytest.raises(PromptLengthError):
        tokenize("a S* square on red plain left top small", vocab)


def test_text_encoder_deterministic_and_frozen(vocab, text):
    ids = tokenize("a S* square", vocab)
    a, b = text.encode_ids(ids), text.encode_ids(ids)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (8, 32) and np.isfinite(a).all()
    for w in text.weights().values():
        assert not w.flags.writeable
    assert not text(ids).requires_grad


def test_text_encoder_is_position_sensitive(vocab, text):
    base = tokenize("a S* square on red plain", vocab)
    for j in range(5):
        other = list(base)
        other[j] = vocab.id("V*") if base[j] != vocab.id("V*") else vocab.id("a")
        assert np.abs(text.encode_ids(other) - text.encode_ids(base)).max() > 0


def test_rare_token_swap_changes_condition(text):
    assert np.abs(text.encode_prompt("a S* square").data - text.encode_prompt("a V* square").data).max() > 0


def test_text_encoder_not_constant_over_vocabulary(vocab, text):
    firsts = np.stack([text.encode_ids([i] + [0] * 7)[0] for i in range(len(vocab))])
    assert np.unique(firsts.round(6), axis=0).shape[0] == len(vocab)


def test_image_encoder(image_encoder):
    subject = SubjectSpec("square", "red", 1)
    scene = SceneSpec("blue", "plain", 4, "medium")
    x = render(subject, scene)
    a = image_encoder(x).data
    b = image_encoder(render(subject, scene)).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (32,)
    other = image_encoder(render(subject, SceneSpec("green", "plain", 4, "medium"))).data
    assert np.linalg.norm(a - other) >= 1e-3


def test_image_encoder_input_errors(image_encoder):
    with pytest.raises(InputError):
        image_encoder(np.zeros((3, 16, 16)))
    with pytest.raises(InputError):
        image_encoder(np.full((3, 32, 32), 1.5))


def test_identity_codec():
    x = np.random.default_rng(0).uniform(-1, 1, (3, 32, 32)).astype(np.float32)
    z = codec_encode(x)
    assert z.shape == x.shape
    np.testing.assert_array_equal(codec_decode(z), x)


def test_encoder_weights_fixed_by_seed(vocab):
    digest = lambda ws: hashlib.sha256(b"".join(w.tobytes() for w in ws.values())).hexdigest()
    assert digest(TextEncoder(vocab).weights()) == digest(TextEncoder(vocab).weights())
    assert digest(ImageEncoder().weights()) == digest(ImageEncoder().weights())
