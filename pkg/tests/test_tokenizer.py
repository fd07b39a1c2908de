import pytest

from volreport import tokenizer as tok
from volreport.errors import DataError, VocabError


def test_vocab_counting_example():
    vocab = tok.build_vocab(["a b", "b c"])
    assert vocab.size == 8  # 3 words + 5 specials
    assert vocab.tokens[:5] == list(tok.SPECIALS)


def test_rebuild_is_bit_identical():
    corpus = ["the liver is normal.", "no nodule seen in the lungs."]
    v1 = tok.build_vocab(corpus)
    v2 = tok.build_vocab(list(corpus))
    assert v1.tokens == v2.tokens


def test_frequency_then_lexicographic_order():
    vocab = tok.build_vocab(["b b a a c"])
    # a and b tie at 2 -> lexicographic; c has 1
    assert vocab.tokens[5:] == ["a", "b", "c"]


def test_unknown_word_maps_to_unk():
    vocab = tok.build_vocab(["a b"])
    ids = tok.encode("a zebra", vocab)
    assert ids[0] != vocab.unk_id and ids[1] == vocab.unk_id


def test_empty_corpus_rejected():
    with pytest.raises(DataError):
        tok.build_vocab([])
    with pytest.raises(DataError):
        tok.build_vocab(["   "])


def test_encode_empty_is_empty():
    vocab = tok.build_vocab(["a"])
    assert tok.encode("", vocab) == []


def test_img_marker_maps_to_special():
    vocab = tok.build_vocab(["describe the region"])
    ids = tok.encode("describe <IMG> now", vocab)
    assert vocab.img_id in ids
    assert ids.count(vocab.img_id) == 1


def test_decode_out_of_range():
    vocab = tok.build_vocab(["a"])
    with pytest.raises(VocabError):
        tok.decode([vocab.size], vocab)


def test_known_words_not_unk():
    vocab = tok.build_vocab(["the liver shows a lesion"])
    ids = tok.encode("liver lesion", vocab)
    assert len(ids) == 2 and all(i != vocab.unk_id for i in ids)


@pytest.mark.parametrize("text", [
    "the liver contains a lesion measuring 7 mm.",
    "no abnormality detected in the lungs or pleura.",
    "how many findings are present in the chest region?",
    "a) 0 b) 1 c) 2 d) 3",
])
def test_roundtrip_exact_on_canonical_text(text):
    assert tok.canonical_text(text) == text
    vocab = tok.build_vocab([text])
    assert tok.decode(tok.encode(text, vocab), vocab) == text


def test_roundtrip_modulo_canonical_whitespace():
    vocab = tok.build_vocab(["No nodule. Liver normal."])
    out = tok.decode(tok.encode("No  nodule.   Liver normal.", vocab), vocab)
    assert out == "no nodule. liver normal."


def test_vocab_save_load(tmp_path):
    vocab = tok.build_vocab(["a b c"])
    vocab.save(tmp_path / "vocab.json")
    back = tok.Vocab.load(tmp_path / "vocab.json")
    assert back.tokens == vocab.tokens
    assert back.index == vocab.index
