"""Independent reference implementations used as test oracles.

Everything here is written from the definitions with plain Python loops and
floats, sharing no code with the library beyond parsed rule objects.
"""
import itertools
import math

import numpy as np

from logicfusion.rules import Rule, Term


def sigmoid(x):
    return 1.0 / (1.0 + math.exp(-x))


class Instance:
    """Soft predictions for one sentence."""

    def __init__(self, entity_probs, tag_names, relation_probs, anchors, relation_names):
        self.E = np.asarray(entity_probs, dtype=float)
        self.tags = list(tag_names)
        self.R = None if relation_probs is None else np.asarray(relation_probs, dtype=float)
        self.anchors = [tuple(a) for a in anchors]
        self.rels = list(relation_names)
        self.m = self.E.shape[0]

    def _tag_set(self, predicate):
        if predicate == "seg_O":
            return {t for t in self.tags if t == "O"}
        if predicate in ("seg_B", "seg_I"):
            return {t for t in self.tags if t.startswith(predicate[-1] + "-")}
        etype = predicate[len("entity_"):]
        return {f"B-{etype}", f"I-{etype}"}

    def value(self, predicate, args):
        if predicate == "prev":
            return 1.0 if args[1] == args[0] - 1 else 0.0
        if predicate.startswith("rel_"):
            rel = predicate[len("rel_"):]
            if args not in self.anchors or rel not in self.rels:
                return 0.0
            return float(self.R[self.anchors.index(args), self.rels.index(rel)])
        wanted = self._tag_set(predicate)
        return float(sum(self.E[args[0], t] for t, name in enumerate(self.tags) if name in wanted))

    def true(self, predicate, args):
        if predicate == "prev":
            return args[1] == args[0] - 1
        if predicate.startswith("rel_"):
            rel = predicate[len("rel_"):]
            if args not in self.anchors or rel not in self.rels:
                return False
            return int(np.argmax(self.R[self.anchors.index(args)])) == self.rels.index(rel)
        return self.tags[int(np.argmax(self.E[args[0]]))] in self._tag_set(predicate)

    def has_counterpart(self, predicate, args):
        if predicate.startswith("rel_"):
            return args in self.anchors and predicate[len("rel_"):] in self.rels
        return True


def _term(term: Term, subst):
    return subst[term.name] if term.is_variable else int(term.name[1:])


def brute_force_logic(rules: list[Rule], inst: Instance, a0=6.0, b0=3.0, a1=6.0, b1=-3.0):
    """{(rule index, head predicate, head args): mean consequent value}.

    Every body variable ranges over all token positions; a substitution
    fires when every disjunctive group holds under argmax truth.
    """
    sums, counts = {}, {}
    for k, rule in enumerate(rules):
        atoms = [lit.atom for lit in rule.literals] + [rule.head]
        if any(not t.is_variable and int(t.name[1:]) >= inst.m for a in atoms for t in a.args):
            continue
        variables = sorted({t.name for lit in rule.literals for t in lit.atom.args if t.is_variable})
        for combo in itertools.product(range(inst.m), repeat=len(variables)):
            subst = dict(zip(variables, combo))
            fired = True
            group_values = []
            for group in rule.body:
                holds = False
                lit_values = []
                for lit in group:
                    args = tuple(_term(t, subst) for t in lit.atom.args)
                    v = inst.value(lit.atom.predicate, args)
                    t = inst.true(lit.atom.predicate, args)
                    if lit.negated:
                        v, t = 1.0 - v, not t
                    holds = holds or t
                    lit_values.append(v)
                if not holds:
                    fired = False
                    break
                group_values.append(lit_values[0] if len(lit_values) == 1 else sigmoid(a1 * sum(lit_values) + b1))
            if not fired:
                continue
            head_args = tuple(_term(t, subst) for t in rule.head.args)
            if not inst.has_counterpart(rule.head.predicate, head_args):
                continue
            value = sigmoid(a0 * (sum(group_values) - len(group_values)) + b0)
            key = (k, rule.head.predicate, head_args)
            sums[key] = sums.get(key, 0.0) + value
            counts[key] = counts.get(key, 0) + 1
    return {key: sums[key] / counts[key] for key in sums}, counts


def discrepancy_oracle(rules, inst, raw_weights, **gamma):
    """Loss and closed-form raw-weight gradient, from the grounding multiset."""
    means, counts = brute_force_logic(rules, inst, **gamma)
    K = len(rules)
    per_rule = [0] * K
    for (k, _, _), c in counts.items():
        per_rule[k] += c
    loss = 0.0
    grad = [0.0] * K
    for (k, pred, args), u in means.items():
        d = (inst.value(pred, args) - u) ** 2
        s = sigmoid(raw_weights[k])
        loss += counts[(k, pred, args)] * s * d / (K * per_rule[k])
        grad[k] += counts[(k, pred, args)] * d * s * (1.0 - s) / (K * per_rule[k])
    return loss, grad


def micro_prf(gold_sets, pred_sets):
    """Micro P/R/F1 by explicit set intersection."""
    tp = sum(len(g & p) for g, p in zip(gold_sets, pred_sets))
    n_pred = sum(len(p) for p in pred_sets)
    n_gold = sum(len(g) for g in gold_sets)
    p = tp / n_pred if n_pred else 0.0
    r = tp / n_gold if n_gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


TAGS = ["O", "B-person", "I-person", "B-location", "I-location", "B-organization", "I-organization"]
RELATIONS = ["NO_RELATION", "live_in", "work_for", "located_in"]
UNARY = ["seg_B", "seg_I", "seg_O", "entity_person", "entity_location", "entity_organization"]
BINARY = ["rel_live_in", "rel_work_for", "rel_located_in", "prev"]


def random_instance(rng: np.random.Generator, m_max=10, sharp=2.0):
    m = int(rng.integers(1, m_max + 1))
    E = rng.normal(scale=sharp, size=(m, len(TAGS)))
    E = np.exp(E - E.max(1, keepdims=True))
    E /= E.sum(1, keepdims=True)
    n_ent = int(rng.integers(0, min(m, 4) + 1))
    ends = sorted(rng.choice(m, size=n_ent, replace=False).tolist())
    anchors = [(i, j) for i in ends for j in ends if i != j]
    R = None
    if anchors:
        R = rng.normal(scale=sharp, size=(len(anchors), len(RELATIONS)))
        R = np.exp(R - R.max(1, keepdims=True))
        R /= R.sum(1, keepdims=True)
    return Instance(E, TAGS, R, anchors, RELATIONS)


def random_rule_text(rng: np.random.Generator, n_vars=3):
    """A range-restricted rule over the standard predicates, as text."""
    names = ["X", "Y", "Z"][:n_vars]
    groups = []
    used = set()
    for _ in range(int(rng.integers(1, 4))):
        lits = []
        for _ in range(1 if rng.random() < 0.7 else 2):
            if rng.random() < 0.5:
                pred = UNARY[rng.integers(len(UNARY))]
                args = [names[rng.integers(len(names))]]
            else:
                pred = BINARY[rng.integers(len(BINARY))]
                args = [names[rng.integers(len(names))] for _ in range(2)]
            if rng.random() < 0.1:
                args[0] = f"w{rng.integers(0, 4)}"
            used.update(a for a in args if a[0].isupper())
            lits.append(("!" if rng.random() < 0.2 else "") + f"{pred}({','.join(args)})")
        groups.append(" | ".join(lits))
    if not used:
        groups.append("seg_O(X)")
        used.add("X")
    pool = sorted(used)
    if rng.random() < 0.5:
        head = f"{UNARY[3 + rng.integers(3)]}({pool[rng.integers(len(pool))]})"
    else:
        head = f"{BINARY[rng.integers(3)]}({pool[rng.integers(len(pool))]},{pool[rng.integers(len(pool))]})"
    return " & ".join(groups) + " => " + head
