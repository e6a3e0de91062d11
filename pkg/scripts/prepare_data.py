"""Build the desk-scale corpus, BPE files and pair sets from locally installed packages.

Sources (no network needed once the packages are installed):
  * gensim's bundled test data: a shortened English Wikipedia dump, the Lee
    news corpus with its document-similarity judgements, WordSim-353 and
    SimLex-999, plus a few small English text files;
  * the CLIP byte-level BPE merge table shipped inside ``open_clip``.

Writes into ``--out`` (default ``data/``):
  corpus.txt       one sentence per line, ASCII-folded
  vocab.txt        "<unk>", 256 base symbols, 256 end-of-word symbols, merged tokens
  merges.txt       the first ``--merges`` rules of the CLIP table
  lee.tsv          document pairs with mean human similarity (1225 rows)
  wordsim353.tsv   word pairs
  simlex999.tsv    word pairs

Usage: python scripts/prepare_data.py [--out data] [--merges 4500]
"""
import argparse
import bz2
import gzip
import importlib.util
import re
import sys
import unicodedata
from pathlib import Path

SENT_SPLIT = re.compile(r"(?<=[.!?])\s+(?=[\"'(\[]?[A-Z0-9])")
WIKI_JUNK = re.compile(r"^(thumb|\||\{|!|=|\*|#|category:|file:|image:)", re.I)


def gensim_data(name):
    from gensim.test.utils import datapath

    return Path(datapath(name))


def fold(text):
    """ASCII-fold and collapse whitespace."""
    text = unicodedata.normalize("NFKD", text).encode("ascii", "ignore").decode("ascii")
    return " ".join(text.split())


def sentences(text, min_words=3):
    for sent in SENT_SPLIT.split(fold(text)):
        if len(sent.split()) >= min_words:
            yield sent


def wiki_sentences():
    from gensim.corpora.wikicorpus import extract_pages, filter_wiki

    path = gensim_data("enwiki-latest-pages-articles1.xml-p000000010p000030302-shortened.bz2")
    with bz2.open(path) as fh:
        for _title, text, _pageid in extract_pages(fh):
            if not text or text.lower().startswith("#redirect"):
                continue
            for para in filter_wiki(text).split("\n"):
                para = re.sub(r"'{2,}", "", para).strip()
                if len(para.split()) < 5 or WIKI_JUNK.match(para):
                    continue
                yield from sentences(para)


def lines_of(name, strip_label=False, encoding="utf-8"):
    with open(gensim_data(name), encoding=encoding, errors="replace") as fh:
        for line in fh:
            if strip_label:
                line = re.sub(r"^__label__\S+\s*", "", line)
                line = re.sub(r"^_\*\d+\s*", "", line)
            yield from sentences(line)


def clip_merges():
    spec = importlib.util.find_spec("open_clip")
    if spec is None:
        sys.exit("open_clip is not installed; `pip install --no-deps open_clip_torch`")
    path = Path(spec.origin).parent / "bpe_simple_vocab_16e6.txt.gz"
    with gzip.open(path, "rt", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    return [tuple(line.split()) for line in lines[1:] if line.strip()]


def byte_symbols():
    """The 256 printable stand-ins for raw bytes used by byte-level BPE tables."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return [chr(c) for c in cs]


def write_pairs(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for a, b, score in rows:
            fh.write(f"{a}\t{b}\t{score}\n")
    return len(rows)


def word_pairs(name):
    rows = []
    with open(gensim_data(name), encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or not line.strip():
                continue
            a, b, score = line.rstrip("\n").split("\t")[:3]
            rows.append((a, b, score))
    return rows


def lee_pairs():
    with open(gensim_data("lee.cor"), encoding="latin-1") as fh:
        docs = [fold(line) for line in fh if line.strip()]
    with open(gensim_data("similarities0-1.txt"), encoding="utf-8") as fh:
        matrix = [[float(x) for x in line.split()] for line in fh if line.strip()]
    rows = []
    for i in range(len(docs)):
        for j in range(i + 1, len(docs)):
            rows.append((docs[i], docs[j], matrix[i][j]))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n")[0])
    ap.add_argument("--out", default="data")
    ap.add_argument("--merges", type=int, default=4500)
    args = ap.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    n_sent = n_words = 0
    with open(out / "corpus.txt", "w", encoding="utf-8") as fh:
        streams = [
            wiki_sentences(),
            lines_of("lee_background.cor", encoding="latin-1"),
            lines_of("para2para_text1.txt"),
            lines_of("para2para_text2.txt"),
            lines_of("pang_lee_polarity.cor", strip_label=True),
            lines_of("alldata-id-10.txt", strip_label=True),
        ]
        for stream in streams:
            for sent in stream:
                fh.write(sent + "\n")
                n_sent += 1
                n_words += len(sent.split())

    merges = clip_merges()[: args.merges]
    base = byte_symbols()
    tokens = ["<unk>"] + base + [c + "</w>" for c in base]
    seen = set(tokens)
    for a, b in merges:
        t = a + b
        if t not in seen:
            seen.add(t)
            tokens.append(t)
    (out / "vocab.txt").write_text("\n".join(tokens) + "\n", encoding="utf-8")
    (out / "merges.txt").write_text("\n".join(f"{a} {b}" for a, b in merges) + "\n", encoding="utf-8")

    n_lee = write_pairs(out / "lee.tsv", lee_pairs())
    n_ws = write_pairs(out / "wordsim353.tsv", word_pairs("wordsim353.tsv"))
    n_sl = write_pairs(out / "simlex999.tsv", word_pairs("simlex999.txt"))
    print(
        f"corpus: {n_sent} sentences, {n_words} words; vocab {len(tokens)}; "
        f"pairs lee={n_lee} wordsim353={n_ws} simlex999={n_sl}",
        file=sys.stderr,
    )


if __name__ == "__main__":
    main()
