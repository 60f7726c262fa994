#!/usr/bin/env python3
"""Turn a MediaWiki XML dump (optionally .bz2) and plain-text files into a
lowercase, one-sentence-per-line training corpus.

Only article pages (namespace 0, not redirects) are used. Markup is
stripped with regular expressions, which is crude but good enough for
desk-scale embedding experiments. Tokens are runs of ASCII letters;
everything else is dropped.

usage: prepare_wiki_corpus.py OUT DUMP.xml[.bz2] [EXTRA.txt ...]
"""

import bz2
import re
import sys
import xml.etree.ElementTree as ET

NESTED = [
    (re.compile(r"\{\{[^{}]*\}\}"), " "),  # templates, innermost first
    (re.compile(r"\{\|[^{}]*?\|\}", re.S), " "),  # tables
]
FLAT = [
    (re.compile(r"<!--.*?-->", re.S), " "),
    (re.compile(r"<ref[^>]*/>"), " "),
    (re.compile(r"<ref[^>]*>.*?</ref>", re.S), " "),
    (re.compile(r"<[^>]+>"), " "),
    (re.compile(r"\[\[(?:file|image|category|[a-z\-]{2,12}):[^\[\]]*(?:\[\[[^\]]*\]\][^\[\]]*)*\]\]", re.I), " "),
    (re.compile(r"\[\[(?:[^\[\]|]*\|)?([^\[\]]*)\]\]"), r"\1"),
    (re.compile(r"\[https?://[^\s\]]+\s*([^\]]*)\]"), r"\1"),
    (re.compile(r"https?://\S+"), " "),
    (re.compile(r"&[a-z]+;|&#\d+;"), " "),
    (re.compile(r"^[*#:;=|!].*$", re.M), lambda m: m.group(0).lstrip("*#:;=|! ").rstrip("= ")),
    (re.compile(r"'{2,}"), ""),
]
SENTENCE = re.compile(r"(?<=[.!?])\s+|\n+")
TOKEN = re.compile(r"[a-z]+")


def strip_markup(text):
    for pattern, repl in NESTED:
        while True:
            text, n = pattern.subn(repl, text)
            if n == 0:
                break
    for pattern, repl in FLAT:
        text = pattern.sub(repl, text)
    return text


def sentences(text):
    for chunk in SENTENCE.split(text):
        tokens = TOKEN.findall(chunk.lower())
        if len(tokens) >= 2:
            yield " ".join(tokens)


def wiki_articles(path):
    opener = bz2.open if path.endswith(".bz2") else open
    with opener(path, "rb") as f:
        ns = None
        title = None
        for _, elem in ET.iterparse(f, events=("end",)):
            tag = elem.tag.rsplit("}", 1)[-1]
            if tag == "ns":
                ns = elem.text
            elif tag == "title":
                title = elem.text
            elif tag == "text":
                body = elem.text or ""
                if ns == "0" and not body.lstrip().lower().startswith("#redirect"):
                    yield title, body
            elif tag == "page":
                elem.clear()


def main(argv):
    if len(argv) < 3:
        sys.exit(__doc__)
    out_path, dump, extras = argv[1], argv[2], argv[3:]
    lines = words = 0
    with open(out_path, "w", encoding="utf-8") as out:
        for _, body in wiki_articles(dump):
            for s in sentences(strip_markup(body)):
                out.write(s + "\n")
                lines += 1
                words += s.count(" ") + 1
        for extra in extras:
            with open(extra, encoding="utf-8", errors="replace") as f:
                for line in f:
                    for s in sentences(line):
                        out.write(s + "\n")
                        lines += 1
                        words += s.count(" ") + 1
    print(f"{out_path}: {lines} sentences, {words} tokens", file=sys.stderr)


if __name__ == "__main__":
    main(sys.argv)
