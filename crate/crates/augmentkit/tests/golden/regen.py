#!/usr/bin/env python3
"""Regenerate golden renderings from the template assets.

Deliberately independent of the Rust renderer: parses the marker format and
substitutes {placeholder} slots with str.replace, nothing else. Run from the
crate root:

    python3 tests/golden/regen.py
"""
import pathlib

HERE = pathlib.Path(__file__).resolve().parent
ASSETS = HERE.parent.parent / "assets" / "templates"

FIXTURES = {
    "expansion_annotation": {
        "task_type": "brainstorming",
        "instruction": "List three uses for a paperclip.",
    },
    "refinement_annotation": {
        "prompt_to_refine": "Tell me about climate change.",
    },
    "train_ie": {
        "instruction_to_expand": "List three uses for a paperclip.",
    },
    "train_ir": {
        "instruction_to_refine": "Tell me about climate change.",
    },
    "train_ire": {
        "demonstrations": "### Instruction:\nName a prime number.\n### Response:\n7",
    },
    "judge_truthfulness": {
        "inst": "What is the capital of France?",
        "ans1": "Paris.",
        "ans2": "The capital of France is Paris, a city on the Seine.",
    },
    "judge_detail": {
        "inst": "What is the capital of France?",
        "ans1": "Paris.",
        "ans2": "The capital of France is Paris, a city on the Seine.",
    },
}


def parse(text):
    sections, current = {}, None
    for line in text.split("\n"):
        if line in ("<<<SYSTEM>>>", "<<<USER>>>", "<<<OUTPUT>>>"):
            current = line
            sections[current] = []
        elif current is not None:
            sections[current].append(line)
    # the asset's trailing newline produces one empty trailing element
    out = {}
    for key, lines in sections.items():
        if lines and lines[-1] == "":
            lines = lines[:-1]
        out[key] = "\n".join(lines)
    return out


def main():
    for name, bindings in FIXTURES.items():
        sections = parse((ASSETS / f"{name}.txt").read_text(encoding="utf-8"))
        user = sections["<<<USER>>>"]
        for key, value in bindings.items():
            user = user.replace("{" + key + "}", value)
        parts = ["<<<SYSTEM>>>", sections["<<<SYSTEM>>>"], "<<<USER>>>", user]
        if "<<<OUTPUT>>>" in sections:
            parts += ["<<<OUTPUT>>>", sections["<<<OUTPUT>>>"]]
        (HERE / f"{name}.golden").write_text("\n".join(parts) + "\n", encoding="utf-8")
        print("wrote", name + ".golden")


if __name__ == "__main__":
    main()
