"""Soft logic on a hand-built sentence: connectives, grounding, discrepancy.

Run: python demos/soft_logic_by_hand.py
"""
import sys

import numpy as np

from logicfusion import autodiff as ad
from logicfusion.autodiff import Tensor
from logicfusion.logic import NeuralView, deep_logic, dump_groundings, gamma_connective
from logicfusion.rules import PredicateSchema, parse_ruleset, serialize
from logicfusion.trainer import discrepancy_loss, rule_weight_gradient_check

TAGS = ["O", "B-person", "I-person", "B-location", "I-location", "B-organization", "I-organization"]
RELATIONS = ["NO_RELATION", "live_in", "work_for", "located_in"]
SCHEMA = PredicateSchema.from_labels(["person", "location", "organization"], ["live_in", "work_for", "located_in"])


def main():
    print("connectives (defaults a0=6, b0=3, a1=6, b1=-3)")
    for kind, vals in [("and", [1, 1]), ("and", [1, 0]), ("and", [0.9, 0.8]), ("or", [0, 1]), ("or", [0, 0]), ("not", [0.3])]:
        print(f"  {kind}{vals} = {gamma_connective(kind, vals).item():.5f}")

    # "anna smith lives in oslo": the model is sure about the relation but
    # hesitant about the location tag of "oslo"
    tokens = ["anna", "smith", "lives", "in", "oslo"]
    E = np.full((5, len(TAGS)), 0.01)
    E[0, 1] = E[1, 2] = 0.94
    E[2, 0] = E[3, 0] = 0.94
    E[4, 3], E[4, 5] = 0.55, 0.39
    E /= E.sum(1, keepdims=True)
    anchors = [(1, 4), (4, 1)]
    R = np.array([[0.05, 0.9, 0.03, 0.02], [0.97, 0.01, 0.01, 0.01]])
    view = NeuralView(Tensor(E), Tensor(R), anchors, TAGS, RELATIONS, SCHEMA)

    rules = parse_ruleset(
        "entity_person(X) & rel_live_in(X,Z) => entity_location(Z)\n"
        "seg_I(X) & prev(X,Z) & entity_person(X) => entity_person(Z)\n"
    )
    print("\nrules:\n" + serialize(rules, include_weights=True))
    logic = deep_logic(rules, view)
    print("groundings (rule, substitution, body values, consequent value):")
    dump_groundings(logic, view, sys.stdout, "anna")
    for h, (pred, args) in enumerate(logic.heads):
        word = tokens[args[0]] if len(args) == 1 else args
        print(f"  {pred}({word}): neural y={logic.y.data[h]:.3f}  logic u={logic.u.data[h]:.3f}")

    loss = discrepancy_loss(logic, rules)
    print(f"\ndiscrepancy loss = {loss.item():.6f}")
    print(rule_weight_gradient_check(logic, rules))

    # one descent step on the neural side alone pulls y toward u
    logits = Tensor(np.log(E), requires_grad=True)
    view = NeuralView(ad.softmax(logits), Tensor(R), anchors, TAGS, RELATIONS, SCHEMA)
    ad.backward(discrepancy_loss(deep_logic(rules, view), rules))
    print(f"d loss / d logit[oslo, B-location] = {logits.grad[4, 3]:+.4f} (negative: raise it)")


if __name__ == "__main__":
    main()
