"""Closed text-template banks for the tabletop world.

All natural-language text in the system is rendered from these templates, so
the vocabulary is closed and every answer has an exact, recomputable ground
truth. The paraphrase bank replaces LLM rewriting at this scale; the eval-only
instruction variants are reserved for the language-shift evaluation suite and
never appear in training data.
"""

from __future__ import annotations

import re

COLORS = ("red", "green", "blue", "yellow")
REGION_NAMES = ("top left corner", "top right corner", "bottom left corner", "bottom right corner")
SUBTASK_NAMES = ("reach", "grasp", "transport", "release")

TASK_INSTRUCTION = "move the {color} block to the {region}"

# Training-time paraphrases of the task instruction (canonical first) and the
# held-out variants used only by the language-shift evaluation suite.
INSTRUCTION_VARIANTS_TRAIN = (
    TASK_INSTRUCTION,
    "put the {color} block in the {region}",
    "take the {color} block to the {region}",
)
INSTRUCTION_VARIANTS_EVAL = (
    "bring the {color} block over to the {region}",
    "place the {color} block inside the {region}",
)

# Imperative form (planning answers / merged sub-task instructions).
SUBTASK_INSTRUCTIONS = {
    "reach": "reach toward the {color} block",
    "grasp": "grasp the {color} block",
    "transport": "carry the {color} block to the {region}",
    "release": "release the {color} block",
}

# Narrative form (clip captions).
SUBTASK_CAPTIONS = {
    "reach": "the robot reaches toward the {color} block",
    "grasp": "the robot grasps the {color} block",
    "transport": "the robot carries the {color} block to the {region}",
    "release": "the robot releases the {color} block",
}

# Past-tense form (verification questions and subtask-completion answers).
SUBTASK_DONE = {
    "reach": "reached the {color} block",
    "grasp": "grasped the {color} block",
    "transport": "carried the {color} block to the {region}",
    "release": "released the {color} block",
}

TASK_CONTEXT = "the task is to {task} ."

Q_PLANNING = TASK_CONTEXT + " what should the robot do next ?"
Q_VERIFICATION = TASK_CONTEXT + " has the robot {done} yet ?"
Q_AFFORDANCE = "can the robot grasp the {color} block right now ?"
Q_SUBTASK = TASK_CONTEXT + " which step did the robot complete most recently ?"
Q_FAILURE = TASK_CONTEXT + " which step did the robot fail ?"
Q_CAPTION = "describe what the robot does ."
Q_TRAJECTORY = TASK_CONTEXT + " where will the gripper move over the next six steps ?"
Q_POINTING = "point at the {color} block ."
Q_REFERRING = "give the bounding box of the {color} block ."
Q_RELATION_LEFT = "is the {c1} block to the left of the {c2} block ?"
Q_RELATION_ABOVE = "is the {c1} block above the {c2} block ?"

A_CAPTION_SUCCESS = "the robot moves the {color} block to the {region}"
A_CAPTION_FAILURE = "the robot tries to move the {color} block to the {region} but fails"
A_NOTHING_YET = "nothing yet"

# Question paraphrases drawn at rewrite time (keyed by canonical template).
PARAPHRASE_BANK = {
    Q_PLANNING: (
        TASK_CONTEXT + " what is the next step ?",
        TASK_CONTEXT + " what comes next for the robot ?",
    ),
    Q_VERIFICATION: (
        TASK_CONTEXT + " is it true that the robot has {done} ?",
        TASK_CONTEXT + " did the robot already {done_do} ?",
    ),
    Q_AFFORDANCE: (
        "is the robot able to grasp the {color} block right now ?",
    ),
    Q_SUBTASK: (
        TASK_CONTEXT + " what did the robot just finish doing ?",
    ),
    Q_CAPTION: (
        "summarize what happens in this episode .",
    ),
    Q_TRAJECTORY: (
        TASK_CONTEXT + " list the next six positions of the gripper .",
    ),
    Q_POINTING: (
        "where is the {color} block ?",
    ),
    Q_REFERRING: (
        "mark the box around the {color} block .",
    ),
    Q_RELATION_LEFT: (
        "does the {c1} block sit to the left of the {c2} block ?",
    ),
    Q_RELATION_ABOVE: (
        "does the {c1} block sit above the {c2} block ?",
    ),
}

# Infinitive form used by one verification paraphrase ("did the robot already ...").
SUBTASK_DO = {
    "reach": "reach the {color} block",
    "grasp": "grasp the {color} block",
    "transport": "carry the {color} block to the {region}",
    "release": "release the {color} block",
}

# Fixed physical-commonsense fact bank (question, answer) pairs.
COMMONSENSE_BANK = (
    ("what happens if the gripper opens while carrying a block ?",
     "the block is released and stays at its current position"),
    ("what happens if the gripper closes far away from every block ?",
     "nothing is grasped"),
    ("does a held block move together with the gripper ?",
     "yes , it follows the gripper"),
    ("can the robot hold two blocks at once ?",
     "no , it can hold only one block"),
    ("what happens when the gripper pushes past the table edge ?",
     "it stops at the edge"),
    ("can two blocks occupy exactly the same place ?",
     "no , blocks rest side by side"),
)

# Mixed-modality round glue.
SUBTASK_MERGE_TEMPLATE = "next {plan}"
TRAJECTORY_INSTRUCTION = "how should the robot execute the trajectory {waypoints} physically ?"
CHAT_TASK_INSTRUCTION = "what should the robot do to finish the task {task}"

_TOKEN_RE = re.compile(r"[a-z]+|[0-9]|[\[\],?.]")


def tokenize_text(text: str) -> list[str]:
    """Lowercase word/digit/punctuation tokens; digits split individually."""
    return _TOKEN_RE.findall(text.lower())


def render(template: str, **slots) -> str:
    return template.format(**slots)


def format_point(x: int, y: int) -> str:
    return f"[{x},{y}]"


def format_bbox(x1: int, y1: int, x2: int, y2: int) -> str:
    return f"[{x1},{y1},{x2},{y2}]"


def format_waypoints(points) -> str:
    return ",".join(format_point(x, y) for x, y in points)


def _all_template_strings() -> list[str]:
    out = [
        Q_AFFORDANCE, Q_CAPTION, Q_POINTING, Q_REFERRING, Q_RELATION_LEFT, Q_RELATION_ABOVE,
        Q_PLANNING, Q_VERIFICATION, Q_SUBTASK, Q_FAILURE, Q_TRAJECTORY,
        A_CAPTION_SUCCESS, A_CAPTION_FAILURE, A_NOTHING_YET,
        SUBTASK_MERGE_TEMPLATE, TRAJECTORY_INSTRUCTION, CHAT_TASK_INSTRUCTION,
        "yes", "no",
    ]
    out.extend(INSTRUCTION_VARIANTS_TRAIN)
    out.extend(INSTRUCTION_VARIANTS_EVAL)
    out.extend(SUBTASK_INSTRUCTIONS.values())
    out.extend(SUBTASK_CAPTIONS.values())
    out.extend(SUBTASK_DONE.values())
    out.extend(SUBTASK_DO.values())
    for variants in PARAPHRASE_BANK.values():
        out.extend(variants)
    for q, a in COMMONSENSE_BANK:
        out.extend((q, a))
    out.extend(COLORS)
    out.extend(REGION_NAMES)
    out.extend(SUBTASK_NAMES)
    return out


def lexicon_words() -> list[str]:
    """Sorted closed set of word tokens reachable from the template banks."""
    words: set[str] = set()
    slot_re = re.compile(r"\{[a-z0-9_]+\}")
    for text in _all_template_strings():
        for tok in tokenize_text(slot_re.sub(" ", text)):
            if tok.isalpha():
                words.add(tok)
    return sorted(words)
