"""Word lists shared by the toy corpus and the synthetic coreference probe."""

FEMALE_NOUNS = ("queen", "mother", "sister", "actress", "girl", "woman", "princess", "aunt", "nun", "bride")
MALE_NOUNS = ("king", "father", "brother", "actor", "boy", "man", "prince", "uncle", "monk", "groom")
FEMALE_NAMES = ("mary", "anna", "lucy", "emma", "sara", "julia", "nora", "ella")
MALE_NAMES = ("john", "peter", "tom", "james", "paul", "mark", "david", "sam")
ROLE_NOUNS = ("ceo", "doctor", "teacher", "pilot", "chef", "lawyer", "nurse", "farmer")

TRANSITIVE_PAST = ("led", "sold", "painted", "cleaned", "fixed", "visited", "found", "lost", "built", "loved")
OBJECTS = ("company", "house", "car", "garden", "boat", "shop", "farm", "team", "book", "horse")
ADJUNCTS = (
    ("to", "success"), ("in", "the", "morning"), ("with", "care"), ("after", "the", "storm"),
    ("for", "a", "week"), ("near", "the", "river"), ("at", "night"), ("before", "noon"),
)
INTRANSITIVE_PAST = ("arrived", "smiled", "waited", "slept", "laughed", "left", "returned", "spoke")
DISTRACTORS = ("people", "children", "workers", "neighbors", "guests", "soldiers", "students", "crowds")
ADJECTIVES = ("happy", "tired", "quiet", "angry", "busy", "hungry", "proud", "calm")

ANIMALS = ("dog", "cat", "bird", "fox", "wolf", "mouse", "goat", "duck")
PRESENT_VERBS = (("chases", "chase"), ("sees", "see"), ("follows", "follow"), ("watches", "watch"),
                 ("likes", "like"), ("bites", "bite"))
PLACES = ("market", "river", "school", "church", "forest", "city", "station", "beach")

PRONOUNS = {"female": ("she", "her"), "male": ("he", "his")}


def _pick(rng, seq):
    return seq[int(rng.integers(len(seq)))]


def subject(rng) -> tuple[list[str], str]:
    """A singular noun phrase and its grammatical gender."""
    r = rng.random()
    if r < 0.3:
        gender = "female" if rng.random() < 0.5 else "male"
        names = FEMALE_NAMES if gender == "female" else MALE_NAMES
        return [_pick(rng, names)], gender
    if r < 0.8:
        gender = "female" if rng.random() < 0.5 else "male"
        nouns = FEMALE_NOUNS if gender == "female" else MALE_NOUNS
        return ["the", _pick(rng, nouns)], gender
    return ["the", _pick(rng, ROLE_NOUNS)], ("female" if rng.random() < 0.5 else "male")


def coref_sentence(rng) -> tuple[list[str], int, tuple[int, int]]:
    """``<subject> <verb> <possessive> <object> <adjunct> .``

    Returns the tokens, the index of the possessive pronoun and the subject
    span ``[start, end)``.
    """
    subj, gender = subject(rng)
    poss = PRONOUNS[gender][1]
    toks = subj + [_pick(rng, TRANSITIVE_PAST), poss, _pick(rng, OBJECTS)]
    toks += list(_pick(rng, ADJUNCTS)) + ["."]
    return toks, len(subj) + 1, (0, len(subj))


def distractor_passage(rng) -> tuple[list[str], int, tuple[int, int], list[int]]:
    """Subject sentence, a sentence about a plural distractor, then a pronoun.

    Returns tokens, the pronoun index, the subject span and the positions of
    the distractor nouns.
    """
    subj, gender = subject(rng)
    pron = PRONOUNS[gender][0]
    toks = subj + [_pick(rng, INTRANSITIVE_PAST), "."]
    distractor_at = len(toks) + 1
    toks += ["the", _pick(rng, DISTRACTORS), "were", _pick(rng, ADJECTIVES), "."]
    mention = len(toks) + 1
    toks += ["then", pron, _pick(rng, TRANSITIVE_PAST), "the", _pick(rng, OBJECTS), "."]
    return toks, mention, (0, len(subj)), [distractor_at]


def animal_sentence(rng) -> list[str]:
    plural = rng.random() < 0.5
    noun = _pick(rng, ANIMALS)
    verb = _pick(rng, PRESENT_VERBS)[1 if plural else 0]
    return ["the", _pick(rng, ADJECTIVES), noun + ("s" if plural else ""), verb, "the", _pick(rng, ANIMALS), "."]


def travel_sentence(rng) -> list[str]:
    a = _pick(rng, FEMALE_NAMES + MALE_NAMES)
    b = _pick(rng, FEMALE_NAMES + MALE_NAMES)
    return [a, "and", b, "went", "to", "the", _pick(rng, PLACES), "."]
