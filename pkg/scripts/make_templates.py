"""Regenerate the shipped template pools under src/mrseg/data/templates.

Train and val pools are built from disjoint lead-in phrases so no template
can appear in both splits.
"""

import itertools
from pathlib import Path

OUT = Path(__file__).resolve().parents[1] / "src" / "mrseg" / "data" / "templates"

LEADS = {
    "train": [
        ("Can you segment", "?"), ("Please segment", "."), ("Segment", "."),
        ("Could you segment", "?"), ("I need a mask of", "."), ("Show me", "."),
        ("Highlight", "."), ("Please outline", "."), ("Can you highlight", "?"),
        ("Mark", "."), ("Please find and segment", "."), ("Could you outline", "?"),
    ],
    "val": [
        ("Would you mind segmenting", "?"), ("Kindly segment", "."), ("Extract", "."),
        ("Give me the segmentation of", "."), ("Isolate", "."), ("Produce a mask for", "."),
        ("Identify and segment", "."), ("Can you cut out", "?"),
    ],
}

FRAMES = {
    "referring": {
        "train": ["{description}", "the region showing {description}",
                  "the object described as {description}", "{description} in this image",
                  "{description} in the picture", "the area covered by {description}",
                  "the pixels of {description}", "the shape of {description}",
                  "where {description} is"],
        "val": ["{description} for me", "the part of the photo with {description}",
                "{description} shown here", "the object that is {description}",
                "the region of {description}", "{description} in the scene",
                "exactly {description}", "the outline of {description}"],
    },
    "positional": {
        "train": ["the {class} that is {relation} {reference}", "the {class} {relation} {reference}",
                  "the {class} located {relation} {reference}",
                  "the {class} positioned {relation} {reference}",
                  "the {class} which sits {relation} {reference}",
                  "the {class} appearing {relation} {reference}",
                  "the {class} that can be seen {relation} {reference}",
                  "the {class} lying {relation} {reference}",
                  "the {class} found {relation} {reference}",
                  "the {class} placed {relation} {reference}"],
        "val": ["the {class} that appears {relation} {reference}",
                "the {class} that lies {relation} {reference}",
                "the {class} sitting {relation} {reference}",
                "the {class} situated {relation} {reference}",
                "the {class} that is found {relation} {reference}",
                "the {class} visible {relation} {reference}",
                "the {class} seen {relation} {reference}",
                "the {class} that is placed {relation} {reference}"],
    },
    "hierarchical": {
        "train": ["the {part} of {reference}", "the {part} belonging to {reference}",
                  "the {part} that is part of {reference}", "the {part} on {reference}",
                  "the {part} attached to {reference}", "the {part} that belongs to {reference}",
                  "just the {part} of {reference}", "only the {part} of {reference}",
                  "the {part} region of {reference}"],
        "val": ["the {part} from {reference}", "the {part} portion of {reference}",
                "the {part} which is a part of {reference}", "the {part} found on {reference}",
                "the {part} that {reference} has", "the {part} component of {reference}",
                "solely the {part} of {reference}", "the {part} piece of {reference}"],
    },
    "interactional": {
        "train": ["the {class} that {reference} is {relation}",
                  "the {class} which {reference} is {relation}",
                  "the {class} {reference} is {relation}",
                  "the {class} related to {reference} by {relation}",
                  "the {class} with which {reference} is {relation}",
                  "the {class} that is the object of {reference} {relation}",
                  "the {class} involved when {reference} is {relation}",
                  "the {class} that {reference} appears to be {relation}",
                  "the {class} linked to {reference} through {relation}"],
        "val": ["the {class} that {reference} seems to be {relation}",
                "the {class} targeted by {reference} {relation}",
                "the {class} connected with {reference} via {relation}",
                "the {class} that {reference} is currently {relation}",
                "the {class} tied to {reference} by {relation}",
                "the {class} that goes with {reference} {relation}",
                "the {class} associated with {reference} {relation}",
                "the {class} that {reference} was {relation}"],
    },
    "semantic": {
        "train": ["the {class}", "all {class} regions", "every region of {class}",
                  "the {class} area", "the part of the image that is {class}"],
        "val": ["the {class} pixels", "the whole {class} region", "any {class} in view",
                "the {class} surface"],
    },
    "attribute": {
        "train": ["the object that {description}", "the thing that {description}",
                  "the item which {description}", "whatever {description}"],
        "val": ["the one that {description}", "the entity that {description}",
                "the subject which {description}"],
    },
}

HARD = {
    "train": [
        "{reference} Please segment the other {class}.",
        "{reference} Segment the other {class}.",
        "{reference} Can you segment the other {class}?",
        "{reference} Show me the other {class}.",
        "{reference} Highlight the other {class}.",
        "{reference} Where is the other {class}?",
        "{reference} Find the remaining {class}.",
        "{reference} Outline the other {class} in the image.",
        "{reference} Segment the {class} that is not this one.",
        "{reference} Mark the second {class}.",
    ],
    "val": [
        "{reference} Isolate the other {class}.",
        "{reference} Kindly segment the other {class}.",
        "{reference} Extract the {class} that differs from this one.",
        "{reference} Give me the mask of the other {class}.",
        "{reference} Would you mind segmenting the other {class}?",
    ],
}

ANSWERS = {
    "train": ["Sure, [SEG].", "Here it is: [SEG].", "Sure, here is the mask: [SEG].",
              "Of course, [SEG].", "Certainly, [SEG].", "No problem, [SEG].",
              "Here is the segmentation: [SEG].", "Done, [SEG].",
              "This is the region: [SEG].", "It is [SEG]."],
    "val": ["Okay, [SEG].", "Sure thing, [SEG].", "Here you go: [SEG].",
            "Found it: [SEG].", "Absolutely, [SEG]."],
}

ATTRIBUTE_ANSWERS = {
    "train": ["Sure, the object you described is the {class}: [SEG].",
              "That would be the {class}: [SEG].", "It is the {class}, [SEG].",
              "You are describing the {class}: [SEG].", "The {class} matches, [SEG]."],
    "val": ["This is the {class}: [SEG].", "The description fits the {class}, [SEG].",
            "That is the {class}: [SEG]."],
}


def build(pool: str, split: str) -> list[str]:
    out = []
    for (lead, end), frame in itertools.product(LEADS[split], FRAMES[pool][split]):
        out.append(f"{lead} {frame}{end}")
    return out


def write(pool: str, split: str, lines: list[str]) -> None:
    d = OUT / pool
    d.mkdir(parents=True, exist_ok=True)
    (d / f"{split}.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def main() -> None:
    for pool in FRAMES:
        for split in ("train", "val"):
            write(pool, split, build(pool, split))
    for split in ("train", "val"):
        write("hard", split, HARD[split])
        write("answer", split, ANSWERS[split])
        write("attribute_answer", split, ATTRIBUTE_ANSWERS[split])


if __name__ == "__main__":
    main()
