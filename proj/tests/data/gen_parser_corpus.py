#!/usr/bin/env python3
"""Regenerates parser_corpus.jsonl. Each family states its expected outcome
when the case is built; the C++ parser is never consulted."""
import json
import random

rng = random.Random(20240611)
cases = []


def add(family, raw, expect, truncated=False):
    rec = {"id": f"{family}-{sum(1 for c in cases if c['family'] == family):02d}", "family": family}
    if isinstance(raw, bytes):
        rec["raw_hex"] = raw.hex()
    else:
        rec["raw"] = raw
    rec["truncated"] = truncated
    rec["expect"] = expect
    cases.append(rec)


TOK = {"positive": "present", "negative": "absent"}
PROSE = ["Sure.", "Here is my answer:", "After reviewing the record,", "Classification result follows.",
         "The record mentions several concerns.", "Answer"]


def lab():
    return rng.choice(["positive", "negative"])


# plain payloads with assorted spacing and case
for _ in range(18):
    l = lab()
    tok = TOK[l]
    tok = rng.choice([tok, tok.upper(), tok.capitalize(), f"  {tok} "])
    sep = rng.choice(["", " ", "\n", "\t"])
    add("plain", "{" + sep + '"label":' + sep + json.dumps(tok) + sep + "}", l)

# prose before and after
for _ in range(14):
    l = lab()
    add("prose", f"{rng.choice(PROSE)} {{\"label\": \"{TOK[l]}\"}} {rng.choice(PROSE)}", l)

# reasoning trace with a decoy payload inside it
for _ in range(16):
    l = lab()
    decoy = TOK["negative" if l == "positive" else "positive"]
    add("trace_decoy", f"<think>First guess {{\"label\": \"{decoy}\"}}. Re-check.</think>\n{{\"label\": \"{TOK[l]}\"}}", l)

# orphan close marker: opening supplied by the chat template
for _ in range(10):
    l = lab()
    decoy = TOK["negative" if l == "positive" else "positive"]
    add("orphan_close", f"thinking {{\"label\": \"{decoy}\"}} more thinking</think>{{\"label\": \"{TOK[l]}\"}}", l)

# two or three payloads: the last one wins
for _ in range(16):
    labels = [lab() for _ in range(rng.choice([2, 3]))]
    body = " then ".join(f'{{"label": "{TOK[x]}"}}' for x in labels)
    add("double_payload", body, labels[-1])

# code fences
for _ in range(10):
    l = lab()
    add("fenced", f"```json\n{{\"label\": \"{TOK[l]}\"}}\n```", l)

# braces and quotes inside string values
for _ in range(10):
    l = lab()
    note = rng.choice(["use } carefully", "a { b", "quote \\\" and }{", "}}}"])
    add("braces_in_strings", f'{{"label": "{TOK[l]}", "note": "{note}"}}', l)

# extra fields alongside the label
for _ in range(8):
    l = lab()
    add("extra_fields", f'{{"confidence": 0.{rng.randint(1, 99)}, "label": "{TOK[l]}", "evidence": ["x", {{"k": 1}}]}}', l)

# cut off mid-payload with the length flag set
for _ in range(10):
    l = lab()
    full = f'{{"label": "{TOK[l]}"}}'
    add("truncated_payload", full[: rng.randint(1, len(full) - 1)], "truncated_output", truncated=True)

# cut off inside an unclosed reasoning block
for _ in range(10):
    add("truncated_trace", "<think>The record says " + "x" * rng.randint(0, 40) + ' {"label": "present"}',
        "truncated_output", truncated=True)

# cut off mid-payload without the flag
for _ in range(10):
    l = lab()
    full = f'{{"label": "{TOK[l]}"}}'
    add("unclosed_payload", full[: rng.randint(1, len(full) - 1)], "malformed_payload")

# brace groups that are not JSON
for raw in ["{label: absent}", "{'label': 'present'}", '{"label": }', '{"label" "present"}', "}{", "{ , }",
            '{"label": present}', "{{", '{"label": "present",}', "{[}]}"]:
    add("not_json", raw, "malformed_payload")

# junk bytes without braces
for _ in range(10):
    junk = bytes(b for b in (rng.randrange(256) for _ in range(rng.randint(1, 64))) if b not in (0x7B, 0x7D))
    add("junk", junk or b"\xff", "no_payload_found")

# junk bytes around a valid payload
for _ in range(10):
    l = lab()
    pre = bytes(b for b in (rng.randrange(256) for _ in range(rng.randint(1, 32))) if b not in (0x7B, 0x7D, 0x22))
    post = bytes(b for b in (rng.randrange(256) for _ in range(rng.randint(1, 32))) if b not in (0x7B, 0x7D, 0x22))
    add("junk_wrapped", pre + f'{{"label": "{TOK[l]}"}}'.encode() + post, l)

# empty and blank outputs
for raw in ["", " ", "\n", "\t\n  ", "\r\n"]:
    add("empty", raw, "no_payload_found")

# prose only
for raw in ["present", "The answer is absent.", "label: present", "I cannot determine this.", "absent"]:
    add("prose_only", raw, "no_payload_found")

# payload only inside the reasoning block
for _ in range(6):
    add("payload_in_trace_only", f'<think>{{"label": "{TOK[lab()]}"}}</think>\nDone.', "no_payload_found")

# missing label field
for raw in ['{"verdict": "present"}', '{"Label": "absent"}', '{"labels": "present"}', '{}',
            '{"result": {"label": "present"}}', '{"answer": "absent", "reason": "none"}']:
    add("missing_label", raw, "missing_label_field")

# values outside the vocabulary
for raw in ['{"label": "maybe"}', '{"label": 1}', '{"label": true}', '{"label": null}', '{"label": ["present"]}',
            '{"label": "yes"}', '{"label": "presents"}', '{"label": ""}']:
    add("invalid_value", raw, "invalid_label_value")

# later invalid payload overrides an earlier valid one
for _ in range(4):
    add("last_invalid", f'{{"label": "{TOK[lab()]}"}} correction: {{"label": "unsure"}}', "invalid_label_value")

# a valid payload followed by a broken fragment: the complete object decides
for _ in range(4):
    l = lab()
    add("valid_then_fragment", f'{{"label": "{TOK[l]}"}} {{"label": ', l)

assert len(cases) == 200, len(cases)
with open(__file__.rsplit("/", 1)[0] + "/parser_corpus.jsonl", "w") as f:
    for c in cases:
        f.write(json.dumps(c, sort_keys=True) + "\n")
