import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from yoss.datamodel import (
    AudioClip,
    BoundingBox,
    ClassVocab,
    Detection,
    EmbeddingBatch,
    GroundedObject,
    GroundingSample,
    HyperParams,
    ImageSample,
    ManifestError,
    TokenSpan,
    ValidationError,
    VocabEntry,
    atomic_write_text,
    extract_segment,
    read_manifest,
    write_manifest,
)
from yoss.synthdata import build_vocab, speak_caption

from conftest import tiny_config


def make_sample(sample_id="s0", boxes=((4, 4, 20, 20),), seed=0):
    cfg = tiny_config()
    vocab = build_vocab(cfg)
    tokens = [vocab[k % len(vocab)].text_token for k in range(len(boxes))]
    audio, spans = speak_caption(tokens, cfg.tone_recipe(), seed)
    pixels = np.random.default_rng(seed).uniform(0, 1, (32, 32, 3))
    objects = tuple(GroundedObject(BoundingBox(*b), k % len(vocab), sp) for k, (b, sp) in enumerate(zip(boxes, spans)))
    return GroundingSample(sample_id, ImageSample(pixels), audio, tuple(tokens), objects), vocab


# ---------------------------------------------------------------------------
# type invariants


@pytest.mark.parametrize("coords", [(5, 0, 5, 1), (0, 5, 1, 2), (0, 0, float("nan"), 1)])
def test_box_rejects_degenerate(coords):
    with pytest.raises(ValidationError, match="box"):
        BoundingBox(*coords)


def test_box_bounds_checked_by_sample():
    with pytest.raises(ValidationError, match="box"):
        make_sample(boxes=((4, 4, 40, 20),))


def test_audio_clip_invariants():
    with pytest.raises(ValidationError):
        AudioClip(np.array([]), 16000)
    with pytest.raises(ValidationError):
        AudioClip(np.array([0.5, 1.5]), 16000)
    with pytest.raises(ValidationError):
        AudioClip(np.zeros(4), 0)
    clip = AudioClip(np.zeros(4), 16000)
    with pytest.raises(ValueError):
        clip.samples[0] = 1.0  # read-only


def test_image_dims_must_divide_by_16():
    with pytest.raises(ValidationError):
        ImageSample(np.zeros((30, 32, 3)))
    with pytest.raises(ValidationError):
        ImageSample(np.full((16, 16, 3), 1.5))


def test_span_invariants():
    with pytest.raises(ValidationError, match="token_span"):
        TokenSpan("a", 5, 5)
    with pytest.raises(ValidationError, match="token_span"):
        TokenSpan("a", 0, 10).check_within(9)


def test_overlapping_spans_rejected():
    sample, _ = make_sample(boxes=((0, 0, 8, 8), (10, 10, 20, 20)))
    a, b = sample.objects
    bad = (a, GroundedObject(b.box, b.class_id, TokenSpan(b.span.token, a.span.start_sample, b.span.end_sample)))
    with pytest.raises(ValidationError, match="token_span"):
        GroundingSample("x", sample.image, sample.caption_audio, sample.caption_text, bad)


def test_vocab_invariants():
    with pytest.raises(ValidationError):
        ClassVocab((VocabEntry(1, "a", "a"),))
    with pytest.raises(ValidationError):
        ClassVocab((VocabEntry(0, "a", "a"), VocabEntry(1, "a", "a")))
    with pytest.raises(ValidationError):
        VocabEntry(0, "a", "a", bucket="huge")
    v = build_vocab(tiny_config())
    assert ClassVocab.from_json(json.loads(json.dumps(v.to_json()))) == v


def test_class_id_outside_vocab():
    sample, vocab = make_sample()
    small = ClassVocab(vocab.entries[:0] or (VocabEntry(0, "x", "x"),))
    bad = GroundingSample("x", sample.image, sample.caption_audio, sample.caption_text,
                          (GroundedObject(sample.objects[0].box, 5, sample.objects[0].span),))
    with pytest.raises(ValidationError, match="class_id"):
        bad.check_vocab(small)


def test_embedding_batch():
    x = np.eye(3)
    EmbeddingBatch(e_i=x, e_a=x, normalized=True)
    with pytest.raises(ValidationError):
        EmbeddingBatch(e_i=x, e_a=np.eye(4))
    with pytest.raises(ValidationError):
        EmbeddingBatch(e_i=2 * x, normalized=True)
    with pytest.raises(ValidationError):
        EmbeddingBatch()


def test_detection_and_hparams():
    with pytest.raises(ValidationError):
        Detection(BoundingBox(0, 0, 1, 1), 0, 1.2)
    d = Detection(BoundingBox(0, 0, 1, 2), 3, 0.5)
    assert Detection.from_json(d.to_json()) == d
    hp = HyperParams()
    assert (hp.tau, hp.lambda_coral, hp.eta_align, hp.reg_max, hp.strides, hp.embed_dim) == (1.0, 0.5, 1.0, 8, (4, 8, 16), 64)
    assert HyperParams.from_json(hp.to_json()) == hp
    for bad in (dict(tau=0), dict(strides=(8, 4, 16)), dict(reg_max=1), dict(lambda_coral=-1)):
        with pytest.raises(ValidationError):
            HyperParams(**bad)


# ---------------------------------------------------------------------------
# extract_segment


def test_extract_segment_identity_and_boundary():
    clip = AudioClip(np.linspace(-1, 1, 50), 8000)
    assert extract_segment(clip, TokenSpan("t", 0, 50)) == clip
    one = extract_segment(clip, TokenSpan("t", 0, 1))
    assert len(one) == 1 and one.samples[0] == -1.0
    with pytest.raises(ValidationError):
        extract_segment(clip, TokenSpan("t", 10, 51))


def test_segments_plus_gaps_reconstruct_caption():
    sample, _ = make_sample(boxes=((0, 0, 8, 8), (10, 10, 20, 20), (20, 0, 30, 9)))
    clip = sample.caption_audio
    pieces, pos = [], 0
    for o in sample.objects:
        pieces.append(clip.samples[pos : o.span.start_sample])  # gap
        pieces.append(extract_segment(clip, o.span).samples)
        pos = o.span.end_sample
    pieces.append(clip.samples[pos:])
    assert np.array_equal(np.concatenate(pieces), clip.samples)


# ---------------------------------------------------------------------------
# manifest round trip


def test_manifest_single_and_empty(tmp_path):
    sample, vocab = make_sample()
    root = write_manifest([sample], vocab, tmp_path / "m")
    assert len((root / "train.jsonl").read_text().splitlines()) == 1
    assert len(list((root / "images").iterdir())) == 1
    assert len(list((root / "audio").iterdir())) == 1
    write_manifest([], vocab, tmp_path / "e")
    samples, v2 = read_manifest(tmp_path / "e")
    assert samples == [] and v2 == vocab


@settings(max_examples=15, deadline=None)
@given(
    n=st.integers(1, 3),
    seed=st.integers(0, 10_000),
    coords=st.lists(st.tuples(st.floats(0, 14), st.floats(0, 14), st.floats(1, 16), st.floats(1, 16)), min_size=1, max_size=3),
)
def test_manifest_round_trip(tmp_path_factory, n, seed, coords):
    boxes = tuple((x, y, x + w, y + h) for x, y, w, h in coords)
    samples = []
    for i in range(n):
        s, vocab = make_sample(f"s{i}", boxes, seed + i)
        samples.append(s)
    root = write_manifest(samples, vocab, tmp_path_factory.mktemp("rt"))
    back, v2 = read_manifest(root)
    assert v2 == vocab and len(back) == len(samples)
    for a, b in zip(samples, back):
        assert a.sample_id == b.sample_id and a.caption_text == b.caption_text
        assert [o.box for o in a.objects] == [o.box for o in b.objects]  # bit-exact floats
        assert [(o.class_id, o.span) for o in a.objects] == [(o.class_id, o.span) for o in b.objects]
        assert np.max(np.abs(a.caption_audio.samples - b.caption_audio.samples)) <= 2.0**-15
        assert np.max(np.abs(a.image.pixels - b.image.pixels)) <= 0.5 / 255 + 1e-12


def _corrupt(root, mutate, split="train"):
    path = root / f"{split}.jsonl"
    lines = path.read_text().splitlines()
    rec = json.loads(lines[0])
    mutate(rec)
    lines[0] = json.dumps(rec)
    path.write_text("\n".join(lines) + "\n")


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda r: r["objects"][0].__setitem__("box", [10, 2, 5, 8]), "box"),
        (lambda r: r["objects"][0].__setitem__("span", [0, 10**9]), "token_span"),
        (lambda r: r["objects"][0].__setitem__("class_id", -1), "class_id"),
        (lambda r: r.pop("caption_text"), "caption_text"),
        (lambda r: r.__setitem__("image", "images/nope.png"), "missing media file"),
    ],
)
def test_corrupted_record_names_field(tmp_path, mutate, field):
    sample, vocab = make_sample()
    root = write_manifest([sample], vocab, tmp_path / "m")
    _corrupt(root, mutate)
    with pytest.raises(ManifestError, match=field) as info:
        read_manifest(root)
    assert "line 1" in str(info.value)


def test_class_id_beyond_vocab_rejected(tmp_path):
    sample, vocab = make_sample()
    root = write_manifest([sample], vocab, tmp_path / "m")
    _corrupt(root, lambda r: r["objects"][0].__setitem__("class_id", 99))
    with pytest.raises(ManifestError, match="class_id"):
        read_manifest(root)


def test_atomic_write_replaces(tmp_path):
    p = tmp_path / "f.txt"
    atomic_write_text(p, "one")
    atomic_write_text(p, "two")
    assert p.read_text() == "two"
    assert [x.name for x in tmp_path.iterdir()] == ["f.txt"]
