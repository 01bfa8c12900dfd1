"""Skill programs: parsing, priority projection, and phase execution.

A skill is an ordered list of phases (plus optional grasp directives).
Within a phase, translational and rotational controllers form separate
priority lists; each lower-priority axis is projected into the null
space of the higher-priority projected axes, so lower controllers can
never disturb higher ones. The surviving per-controller commands sum
into a single end-effector twist.

Skill source grammar (line comments start with '#'):

    skill NAME {
      uses ROLE: path/to/spec.json      # or the literal word: robot
      phase NAME budget=INT {
        Kind(role.label, ... [, theta=VALUE] [, kp=... kr=... kf=...]
             [, v_max=...] [, w_max=...] [, done_tol=...]);
        ...
      }
      grasp ROLE at KEYPOINT_LABEL
    }

Controller kinds and binding arities: PosAlign(kp, kp), PosWaypoint(kp,
kp, axis), AxisAlign(axis, axis), ForceAlign(axis). theta may also be
given positionally right after the bindings. Lengths are meters; angles
(AxisAlign theta and done_tol) are degrees in source text.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .controllers import (
    AXIS_ALIGN,
    BINDING_ARITY,
    DEFAULT_DONE_TOL,
    FORCE_ALIGN,
    KIND_CLASS,
    POS_ALIGN,
    POS_WAYPOINT,
    ROTATIONAL,
    TRANSLATIONAL,
    ControllerConfig,
    ControllerState,
    Gains,
    Limits,
    done_capable,
    step_controller,
)
from .errors import (
    DuplicateLabel,
    PriorityOverflow,
    SkillSyntaxError,
    SkillValidationError,
    TaskAxesError,
    UnboundSymbol,
    UnknownControllerKind,
)

ROBOT_ROLE_SOURCE = "robot"
MAX_PRIORITIES = 3
_PROJ_TOL = 1e-9


# ----------------------------------------------------------------------
# AST


@dataclass(frozen=True)
class SkillPhase:
    name: str
    translational: tuple
    rotational: tuple
    step_budget: int


@dataclass(frozen=True)
class GraspStep:
    role: str
    keypoint: str


@dataclass(frozen=True)
class LiftedSkill:
    name: str
    uses: tuple            # ((role, source), ...) in declaration order
    steps: tuple           # SkillPhase | GraspStep in execution order

    @property
    def phases(self):
        return tuple(s for s in self.steps if isinstance(s, SkillPhase))

    @property
    def roles(self):
        return dict(self.uses)


# ----------------------------------------------------------------------
# null-space priority projection


def project_axes(axes):
    """Project each axis into the null space of higher-priority ones.

    Returns one entry per input: the projected unit axis, or None when
    the residual collapses (the controller is inactive this tick). The
    orthogonalization runs against previously accepted projected axes
    and subtracts twice for numerical robustness near degeneracy.
    """
    basis = []
    out = []
    for axis in axes:
        r = np.asarray(axis, dtype=np.float64).copy()
        for _ in range(2):
            for b in basis:
                r -= float(b @ r) * b
        n = float(np.linalg.norm(r))
        if n < _PROJ_TOL:
            out.append(None)
        else:
            ahat = r / n
            basis.append(ahat)
            out.append(ahat)
    return out


@dataclass(frozen=True)
class ProjectedEntry:
    axis: np.ndarray
    action: float
    active: bool


def project_actions(outputs, projected):
    """Per-controller surviving command: u_hat = u * (axis . axis_hat)."""
    entries = []
    for out, ahat in zip(outputs, projected):
        if ahat is None or out.inactive:
            entries.append(ProjectedEntry(np.zeros(3), 0.0, False))
        else:
            u_hat = out.action * float(out.primary_axis @ ahat)
            entries.append(ProjectedEntry(ahat, u_hat, True))
    return entries


@dataclass(frozen=True)
class Twist:
    v: np.ndarray
    w: np.ndarray

    @staticmethod
    def zero():
        return Twist(np.zeros(3), np.zeros(3))


def _clamped_sum(entries, limit):
    total = np.zeros(3)
    for e in entries:
        if e.active:
            total = total + e.action * e.axis
    n = float(np.linalg.norm(total))
    if n > limit:
        total = total * (limit / n)
    return total


def compose_twist(trans_entries, rot_entries, limits: Limits) -> Twist:
    """Sum projected commands into one twist, norm-clamped per class."""
    return Twist(v=_clamped_sum(trans_entries, limits.v_max),
                 w=_clamped_sum(rot_entries, limits.w_max))


# ----------------------------------------------------------------------
# phase execution


@dataclass
class PhaseResult:
    outcome: str    # "done" | "budget_exhausted"
    ticks: int


def _aligned_projection(outputs):
    axes = [o.primary_axis for o in outputs if not o.inactive]
    projected = iter(project_axes(axes))
    return [None if o.inactive else next(projected) for o in outputs]


def run_phase(phase: SkillPhase, env, limits: Limits, on_tick=None) -> PhaseResult:
    """Run one phase against an environment until done or out of budget.

    env must provide observe() -> ObservationBundle and apply(Twist).
    The phase is done when every done-capable controller reports done on
    the same tick; a phase with no done-capable controllers runs its
    whole budget and counts as done. Controller errors propagate with
    phase/tick context attached.
    """
    stacks = ((TRANSLATIONAL, phase.translational), (ROTATIONAL, phase.rotational))
    states = {(cls, i): ControllerState()
              for cls, cfgs in stacks for i in range(len(cfgs))}
    has_done_capable = any(done_capable(c) for _, cfgs in stacks for c in cfgs)
    ticks = 0
    while ticks < phase.step_budget:
        obs = env.observe()
        outputs = {}
        for cls, cfgs in stacks:
            outs = []
            for i, cfg in enumerate(cfgs):
                try:
                    out, states[(cls, i)] = step_controller(cfg, obs, states[(cls, i)])
                except TaskAxesError as err:
                    raise err.annotate(
                        f"phase {phase.name!r} tick {ticks} {cls}[{i}] {cfg.kind}")
                outs.append(out)
            outputs[cls] = outs
        proj_t = _aligned_projection(outputs[TRANSLATIONAL])
        proj_r = _aligned_projection(outputs[ROTATIONAL])
        cmd_t = project_actions(outputs[TRANSLATIONAL], proj_t)
        cmd_r = project_actions(outputs[ROTATIONAL], proj_r)
        twist = compose_twist(cmd_t, cmd_r, limits)
        env.apply(twist)
        ticks += 1
        if on_tick is not None:
            on_tick(_tick_record(phase, stacks, outputs, {TRANSLATIONAL: cmd_t,
                                                          ROTATIONAL: cmd_r}, twist))
        all_done = True
        for cls, cfgs in stacks:
            for cfg, out in zip(cfgs, outputs[cls]):
                if done_capable(cfg) and not out.done:
                    all_done = False
        if has_done_capable and all_done:
            return PhaseResult("done", ticks)
    if phase.step_budget > 0 and not has_done_capable:
        return PhaseResult("done", ticks)
    return PhaseResult("budget_exhausted", ticks)


def _tick_record(phase, stacks, outputs, commands, twist):
    controllers = []
    for cls, cfgs in stacks:
        for i, (cfg, out, cmd) in enumerate(zip(cfgs, outputs[cls], commands[cls])):
            controllers.append({
                "class": cls,
                "priority": i + 1,
                "kind": cfg.kind,
                "axis": [float(x) for x in out.primary_axis],
                "axis_hat": [float(x) for x in cmd.axis] if cmd.active else None,
                "u": float(out.action),
                "u_hat": float(cmd.action),
                "active": bool(cmd.active),
                "done": bool(out.done),
            })
    return {
        "phase": phase.name,
        "controllers": controllers,
        "twist": {"v": [float(x) for x in twist.v], "w": [float(x) for x in twist.w]},
    }


# ----------------------------------------------------------------------
# DSL lexer


_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")
_NUM_RE = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_PUNCT = {"{": "LBRACE", "}": "RBRACE", "(": "LPAREN", ")": "RPAREN",
          "[": "LBRACKET", "]": "RBRACKET", ",": "COMMA", ";": "SEMI",
          ":": "COLON", "=": "EQUALS", ".": "DOT"}


@dataclass
class _Token:
    kind: str
    value: object
    line: int
    col: int


class _Lexer:
    def __init__(self, text):
        self.text = text
        self.pos = 0
        self.line = 1
        self.col = 1

    def _step(self, n=1):
        for _ in range(n):
            if self.pos < len(self.text) and self.text[self.pos] == "\n":
                self.line += 1
                self.col = 1
            else:
                self.col += 1
            self.pos += 1

    def _skip_ws(self):
        while self.pos < len(self.text):
            ch = self.text[self.pos]
            if ch in " \t\r\n":
                self._step()
            elif ch == "#":
                while self.pos < len(self.text) and self.text[self.pos] != "\n":
                    self._step()
            else:
                return

    def next(self) -> _Token:
        self._skip_ws()
        if self.pos >= len(self.text):
            return _Token("EOF", None, self.line, self.col)
        line, col = self.line, self.col
        ch = self.text[self.pos]
        m = _NUM_RE.match(self.text, self.pos)
        if m and (ch.isdigit() or
                  (ch in "+-." and self.pos + 1 < len(self.text)
                   and (self.text[self.pos + 1].isdigit() or self.text[self.pos + 1] == "."))):
            self._step(m.end() - self.pos)
            return _Token("NUMBER", float(m.group()), line, col)
        m = _NAME_RE.match(self.text, self.pos)
        if m:
            self._step(m.end() - self.pos)
            return _Token("NAME", m.group(), line, col)
        if ch in _PUNCT:
            self._step()
            return _Token(_PUNCT[ch], ch, line, col)
        raise SkillSyntaxError(line, col, f"a token (found {ch!r})")

    def rest_of_line(self) -> _Token:
        while self.pos < len(self.text) and self.text[self.pos] in " \t":
            self._step()
        line, col = self.line, self.col
        chars = []
        while self.pos < len(self.text) and self.text[self.pos] not in "\n#":
            chars.append(self.text[self.pos])
            self._step()
        value = "".join(chars).rstrip()
        if not value:
            raise SkillSyntaxError(line, col, "a spec file path or 'robot'")
        return _Token("PATH", value, line, col)


# ----------------------------------------------------------------------
# DSL parser


_PARAM_NAMES = ("theta", "kp", "kr", "kf", "v_max", "w_max", "done_tol")


class _Parser:
    def __init__(self, text, default_gains=None, default_limits=None):
        self.lex = _Lexer(text)
        self.tok = self.lex.next()
        self.default_gains = default_gains or Gains()
        self.default_limits = default_limits or Limits()

    def _advance(self):
        self.tok = self.lex.next()

    def _fail(self, expected, tok=None):
        t = tok or self.tok
        raise SkillSyntaxError(t.line, t.col, expected)

    def _expect(self, kind, expected):
        if self.tok.kind != kind:
            self._fail(expected)
        tok = self.tok
        self._advance()
        return tok

    def _at_keyword(self, word):
        return self.tok.kind == "NAME" and self.tok.value == word

    def _expect_keyword(self, word):
        if not self._at_keyword(word):
            self._fail(f"'{word}'")
        self._advance()

    def parse(self) -> LiftedSkill:
        self._expect_keyword("skill")
        name = self._expect("NAME", "skill name").value
        self._expect("LBRACE", "'{'")
        uses = []
        declared = set()
        while self._at_keyword("uses"):
            self._advance()
            role_tok = self._expect("NAME", "role name")
            if role_tok.value in declared:
                raise DuplicateLabel(f"role {role_tok.value!r} declared twice",
                                     role_tok.line, role_tok.col)
            declared.add(role_tok.value)
            if self.tok.kind != "COLON":
                self._fail("':'")
            path = self.lex.rest_of_line().value
            self._advance()
            uses.append((role_tok.value, path))
        steps = []
        phase_names = set()
        while self.tok.kind != "RBRACE":
            if self._at_keyword("phase"):
                steps.append(self._phase(declared, phase_names))
            elif self._at_keyword("grasp"):
                steps.append(self._grasp(declared))
            else:
                self._fail("'phase', 'grasp', or '}'")
        closing = self.tok
        self._advance()
        self._expect("EOF", "end of input")
        if not any(isinstance(s, SkillPhase) for s in steps):
            raise SkillValidationError("skill needs at least one phase",
                                       closing.line, closing.col)
        return LiftedSkill(name=name, uses=tuple(uses), steps=tuple(steps))

    def _grasp(self, declared):
        self._advance()
        role_tok = self._expect("NAME", "role name")
        if role_tok.value not in declared:
            raise UnboundSymbol(f"role {role_tok.value!r} not declared with 'uses'",
                                role_tok.line, role_tok.col)
        self._expect_keyword("at")
        label = self._expect("NAME", "keypoint label").value
        return GraspStep(role=role_tok.value, keypoint=label)

    def _phase(self, declared, phase_names):
        self._advance()
        name_tok = self._expect("NAME", "phase name")
        if name_tok.value in phase_names:
            raise DuplicateLabel(f"phase {name_tok.value!r} declared twice",
                                 name_tok.line, name_tok.col)
        phase_names.add(name_tok.value)
        self._expect_keyword("budget")
        self._expect("EQUALS", "'='")
        budget_tok = self._expect("NUMBER", "step budget")
        if budget_tok.value < 0 or not float(budget_tok.value).is_integer():
            self._fail("a non-negative integer budget", budget_tok)
        self._expect("LBRACE", "'{'")
        controllers = [self._controller(declared)]
        while self.tok.kind == "SEMI":
            self._advance()
            if self.tok.kind == "RBRACE":
                break
            controllers.append(self._controller(declared))
        self._expect("RBRACE", "'}' or ';'")
        trans, rot = [], []
        for cfg, line, col in controllers:
            stack = trans if cfg.control_class == TRANSLATIONAL else rot
            stack.append(cfg)
            if len(stack) > MAX_PRIORITIES:
                raise PriorityOverflow(
                    f"more than {MAX_PRIORITIES} {cfg.control_class} controllers "
                    f"in phase {name_tok.value!r}", line, col)
        return SkillPhase(name=name_tok.value, translational=tuple(trans),
                          rotational=tuple(rot), step_budget=int(budget_tok.value))

    def _controller(self, declared):
        kind_tok = self._expect("NAME", "controller kind")
        if kind_tok.value not in KIND_CLASS:
            raise UnknownControllerKind(f"unknown controller kind {kind_tok.value!r}",
                                        kind_tok.line, kind_tok.col)
        kind = kind_tok.value
        self._expect("LPAREN", "'('")
        bindings = []
        theta = None
        theta_seen = False
        params = {}
        expect_binding = True
        while True:
            if self.tok.kind == "NAME":
                name_tok = self.tok
                self._advance()
                if self.tok.kind == "DOT":
                    if not expect_binding:
                        self._fail("a parameter, not a binding", name_tok)
                    if name_tok.value not in declared:
                        raise UnboundSymbol(
                            f"role {name_tok.value!r} not declared with 'uses'",
                            name_tok.line, name_tok.col)
                    self._advance()
                    label = self._expect("NAME", "binding label").value
                    bindings.append(f"{name_tok.value}.{label}")
                elif self.tok.kind == "EQUALS":
                    if name_tok.value not in _PARAM_NAMES:
                        self._fail(f"one of {', '.join(_PARAM_NAMES)}", name_tok)
                    if name_tok.value in params or (name_tok.value == "theta" and theta_seen):
                        self._fail(f"a single {name_tok.value} parameter", name_tok)
                    self._advance()
                    value = self._value()
                    if name_tok.value == "theta":
                        theta = value
                        theta_seen = True
                    else:
                        if not isinstance(value, float):
                            self._fail("a scalar value", name_tok)
                        params[name_tok.value] = value
                    expect_binding = False
                else:
                    self._fail("'.' or '='")
            elif self.tok.kind in ("NUMBER", "LBRACKET"):
                if theta_seen:
                    self._fail("a named parameter (theta already given)")
                theta = self._value()
                theta_seen = True
                expect_binding = False
            else:
                self._fail("a binding, value, or parameter")
            if self.tok.kind == "COMMA":
                self._advance()
                continue
            self._expect("RPAREN", "')' or ','")
            break
        if len(bindings) != BINDING_ARITY[kind]:
            self._fail(f"{BINDING_ARITY[kind]} bindings for {kind}", kind_tok)
        gains = Gains(kp=params.get("kp", self.default_gains.kp),
                      kr=params.get("kr", self.default_gains.kr),
                      kf=params.get("kf", self.default_gains.kf))
        limits = Limits(v_max=params.get("v_max", self.default_limits.v_max),
                        w_max=params.get("w_max", self.default_limits.w_max))
        try:
            cfg = ControllerConfig(kind=kind, bindings=tuple(bindings), theta=theta,
                                   gains=gains, limits=limits,
                                   done_tol=params.get("done_tol"))
        except TaskAxesError as err:
            raise err.annotate(f"line {kind_tok.line}, col {kind_tok.col}")
        return cfg, kind_tok.line, kind_tok.col

    def _value(self):
        if self.tok.kind == "NUMBER":
            value = float(self.tok.value)
            self._advance()
            return value
        if self.tok.kind == "LBRACKET":
            self._advance()
            if self.tok.kind == "RBRACKET":
                self._advance()
                return ()
            if self.tok.kind == "LBRACKET":
                vectors = [self._vector()]
                while self.tok.kind == "COMMA":
                    self._advance()
                    vectors.append(self._vector())
                self._expect("RBRACKET", "']'")
                return tuple(vectors)
            numbers = [self._number()]
            while self.tok.kind == "COMMA":
                self._advance()
                numbers.append(self._number())
            self._expect("RBRACKET", "']'")
            return tuple(numbers)
        self._fail("a number or '['")

    def _vector(self):
        self._expect("LBRACKET", "'['")
        numbers = [self._number()]
        while self.tok.kind == "COMMA":
            self._advance()
            numbers.append(self._number())
        self._expect("RBRACKET", "']'")
        return tuple(numbers)

    def _number(self):
        return float(self._expect("NUMBER", "a number").value)


def parse_skill(text: str, default_gains: Gains = None,
                default_limits: Limits = None) -> LiftedSkill:
    """Parse skill source text into a validated LiftedSkill.

    default_gains/default_limits preset what unspecified controller
    parameters resolve to (the packaged defaults otherwise); explicit
    values in the source always win.
    """
    return _Parser(text, default_gains, default_limits).parse()


# ----------------------------------------------------------------------
# canonical printer and JSON form


def _fmt_number(x) -> str:
    return repr(float(x))


def _fmt_value(value) -> str:
    if isinstance(value, float):
        return _fmt_number(value)
    if value and isinstance(value[0], tuple):
        return "[" + ", ".join(_fmt_value(v) for v in value) + "]"
    return "[" + ", ".join(_fmt_number(x) for x in value) + "]"


def _controller_source(cfg: ControllerConfig) -> str:
    parts = list(cfg.bindings)
    default_theta = {POS_ALIGN: (0.0, 0.0, 0.0), AXIS_ALIGN: (0.0, 0.0, 0.0),
                     FORCE_ALIGN: 0.0}.get(cfg.kind)
    if cfg.kind == POS_WAYPOINT or cfg.theta != default_theta:
        parts.append(f"theta={_fmt_value(cfg.theta)}")
    for name, value, default in (("kp", cfg.gains.kp, Gains.kp),
                                 ("kr", cfg.gains.kr, Gains.kr),
                                 ("kf", cfg.gains.kf, Gains.kf),
                                 ("v_max", cfg.limits.v_max, Limits.v_max),
                                 ("w_max", cfg.limits.w_max, Limits.w_max),
                                 ("done_tol", cfg.done_tol, DEFAULT_DONE_TOL.get(cfg.kind))):
        if value != default:
            parts.append(f"{name}={_fmt_number(value)}")
    return f"{cfg.kind}({', '.join(parts)})"


def format_skill(skill: LiftedSkill) -> str:
    """Canonical source text; parse(format_skill(ast)) == ast."""
    lines = [f"skill {skill.name} {{"]
    for role, source in skill.uses:
        lines.append(f"  uses {role}: {source}")
    for step in skill.steps:
        if isinstance(step, GraspStep):
            lines.append(f"  grasp {step.role} at {step.keypoint}")
            continue
        lines.append(f"  phase {step.name} budget={step.step_budget} {{")
        for cfg in step.rotational + step.translational:
            lines.append(f"    {_controller_source(cfg)};")
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"


def skill_to_json(skill: LiftedSkill) -> dict:
    def controller(cfg):
        return {
            "kind": cfg.kind,
            "class": cfg.control_class,
            "bindings": list(cfg.bindings),
            "theta": cfg.theta if isinstance(cfg.theta, float)
            else [list(w) if isinstance(w, tuple) else w for w in cfg.theta],
            "gains": {"kp": cfg.gains.kp, "kr": cfg.gains.kr, "kf": cfg.gains.kf},
            "limits": {"v_max": cfg.limits.v_max, "w_max": cfg.limits.w_max},
            "done_tol": cfg.done_tol,
        }

    steps = []
    for step in skill.steps:
        if isinstance(step, GraspStep):
            steps.append({"grasp": {"role": step.role, "keypoint": step.keypoint}})
        else:
            steps.append({"phase": {
                "name": step.name,
                "budget": step.step_budget,
                "translational": [controller(c) for c in step.translational],
                "rotational": [controller(c) for c in step.rotational],
            }})
    return {"skill": skill.name, "uses": [list(u) for u in skill.uses], "steps": steps}
