import copy
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

from config import Config
from models.coefficient_profile import CoefficientProfile
from models.market_spec import MarketSpec
from models.problem_spec import ProblemSpec
from models.rank_view import SimplexPoint
from utils.error_handlers import ValidationError
from utils.validators import validate_experiment_data

PDE_MODES = ('projected', 'penalized')


@dataclass(frozen=True)
class PdeNumerics:
    space_steps: Tuple[int, ...] = (200,)
    time_steps: int = 200
    radius: float = 4.0
    theta: float = 1.0
    psor: bool = False
    mode: str = 'projected'
    penalty: float = 0.0
    retain: Tuple[float, ...] = ()

    def __post_init__(self):
        if not 0.5 <= self.theta <= 1.0:
            raise ValidationError(f'theta must lie in [0.5, 1], got {self.theta}',
                                  details={'key': 'numerics.pde.theta'})
        if self.mode not in PDE_MODES:
            raise ValidationError(f"Unknown PDE mode '{self.mode}'. Valid modes: {list(PDE_MODES)}",
                                  details={'key': 'numerics.pde.mode'})
        if self.mode == 'penalized' and self.penalty <= 0:
            raise ValidationError('Penalized PDE mode needs a positive penalty',
                                  details={'key': 'numerics.pde.penalty'})

    def steps_for(self, n: int) -> Tuple[int, ...]:
        if len(self.space_steps) == 1:
            return self.space_steps * n
        return self.space_steps

    def to_dict(self) -> Dict:
        return {'space_steps': list(self.space_steps), 'time_steps': self.time_steps,
                'radius': self.radius, 'theta': self.theta, 'psor': self.psor,
                'mode': self.mode, 'penalty': self.penalty, 'retain': list(self.retain)}

    @classmethod
    def from_dict(cls, data: Dict) -> 'PdeNumerics':
        steps = data.get('space_steps', 200)
        steps = (int(steps),) if isinstance(steps, (int, float)) else tuple(int(s) for s in steps)
        return cls(space_steps=steps,
                   time_steps=int(data.get('time_steps', 200)),
                   radius=float(data.get('radius', 4.0)),
                   theta=float(data.get('theta', 1.0)),
                   psor=bool(data.get('psor', False)),
                   mode=data.get('mode', 'projected'),
                   penalty=float(data.get('penalty', 0.0)),
                   retain=tuple(float(t) for t in data.get('retain', [])))


@dataclass(frozen=True)
class Numerics:
    """Monte Carlo and PDE settings of one experiment; the seed is always explicit"""

    seed: int
    time_steps: int = 64
    n_paths: int = 20000
    basis_degree: int = Config.DEFAULT_BASIS_DEGREE
    split_sample: bool = False
    penalty_ladder: Tuple[float, ...] = (10.0, 100.0, 1000.0)
    threads: int = Config.DEFAULT_THREADS
    allow_nonconcave: bool = False
    pde: PdeNumerics = field(default_factory=PdeNumerics)
    tolerance_abs: float = Config.TOLERANCE_ABS
    tolerance_k: float = Config.TOLERANCE_K
    ladder: Dict = field(default_factory=dict)

    def __post_init__(self):
        if self.time_steps < 1:
            raise ValidationError('time_steps must be >= 1', details={'key': 'numerics.time_steps'})
        if self.n_paths < 1:
            raise ValidationError('n_paths must be >= 1', details={'key': 'numerics.n_paths'})
        if self.basis_degree < 0:
            raise ValidationError('basis_degree must be >= 0', details={'key': 'numerics.basis_degree'})
        if self.threads < 1:
            raise ValidationError('threads must be >= 1', details={'key': 'numerics.threads'})

    def with_overrides(self, **changes) -> 'Numerics':
        return replace(self, **{k: v for k, v in changes.items() if v is not None})

    def to_dict(self) -> Dict:
        return {
            'seed': self.seed, 'time_steps': self.time_steps, 'n_paths': self.n_paths,
            'basis_degree': self.basis_degree, 'split_sample': self.split_sample,
            'penalty_ladder': list(self.penalty_ladder), 'threads': self.threads,
            'allow_nonconcave': self.allow_nonconcave, 'pde': self.pde.to_dict(),
            'tolerance': {'abs': self.tolerance_abs, 'k': self.tolerance_k},
            'ladder': self.ladder,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'Numerics':
        if data.get('seed') is None:
            raise ValidationError('numerics.seed is required; seeds are never drawn from entropy',
                                  details={'key': 'numerics.seed'})
        tolerance = data.get('tolerance', {})
        return cls(seed=int(data['seed']),
                   time_steps=int(data.get('time_steps', 64)),
                   n_paths=int(data.get('n_paths', 20000)),
                   basis_degree=int(data.get('basis_degree', Config.DEFAULT_BASIS_DEGREE)),
                   split_sample=bool(data.get('split_sample', False)),
                   penalty_ladder=tuple(float(m) for m in data.get('penalty_ladder', [10, 100, 1000])),
                   threads=int(data.get('threads', Config.DEFAULT_THREADS)),
                   allow_nonconcave=bool(data.get('allow_nonconcave', False)),
                   pde=PdeNumerics.from_dict(data.get('pde', {})),
                   tolerance_abs=float(tolerance.get('abs', Config.TOLERANCE_ABS)),
                   tolerance_k=float(tolerance.get('k', Config.TOLERANCE_K)),
                   ladder=dict(data.get('ladder', {})))


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    """One scenario: model, problem or market, numerics, probes and output location"""

    scenario: str
    numerics: Numerics
    t0: float
    T: float
    document: Dict
    profile: Optional[CoefficientProfile] = None
    problem: Optional[ProblemSpec] = None
    x0: Optional[SimplexPoint] = None
    market: Optional[MarketSpec] = None
    probes: List[Dict] = field(default_factory=list)
    output_dir: Optional[str] = None

    @property
    def is_market(self) -> bool:
        return self.market is not None

    @property
    def seed(self) -> int:
        return self.numerics.seed

    def canonical_json(self) -> str:
        """Sorted compact JSON of the document minus thread count and output location,
        neither of which changes any emitted number."""
        hashed = {k: v for k, v in self.document.items() if k != 'output_dir'}
        hashed['numerics'] = {k: v for k, v in self.document.get('numerics', {}).items() if k != 'threads'}
        return json.dumps(hashed, sort_keys=True, separators=(',', ':'))

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode('utf-8')).hexdigest()

    @classmethod
    def from_dict(cls, data: Dict, seed: Optional[int] = None, threads: Optional[int] = None,
                  output_dir: Optional[str] = None) -> 'ExperimentConfig':
        """Validate the document structurally, apply overrides, then build the objects."""
        document = copy.deepcopy(data)
        numerics_doc = document.setdefault('numerics', {})
        if seed is not None:
            numerics_doc['seed'] = int(seed)
        if threads is not None:
            numerics_doc['threads'] = int(threads)
        if output_dir is not None:
            document['output_dir'] = output_dir

        report = validate_experiment_data(document)
        if not report['valid']:
            first = report['errors'][0]
            raise ValidationError(first['message'], details={'key': first['key'], 'errors': report['errors']})

        numerics = Numerics.from_dict(numerics_doc)
        t0 = float(document.get('t0', 0.0))
        T = float(document['T'])
        probes = [_probe(p) for p in document.get('probes', [])]
        common = dict(scenario=document.get('scenario', 'unnamed'), numerics=numerics, t0=t0, T=T,
                      document=document, probes=probes, output_dir=document.get('output_dir'))

        if 'market' in document:
            profile = None if 'profile' in document['market'] else CoefficientProfile.from_dict(document)
            market = MarketSpec.from_dict(document['market'], profile=profile, t0=t0, T=T)
            return cls(market=market, **common)

        profile = CoefficientProfile.from_dict(document)
        problem = ProblemSpec.from_dict(document, profile=profile, maturity=T)
        x0 = SimplexPoint.from_coords(document['x0'])
        if x0.n != profile.n:
            raise ValidationError(f'x0 has {x0.n} coordinates for n={profile.n}', details={'key': 'x0'})
        return cls(profile=profile, problem=problem, x0=x0, **common)


def _probe(data: Dict) -> Dict:
    t = float(data['t'])
    if 'p' in data:
        return {'t': t, 'x': [math.log(float(p)) for p in data['p']]}
    return {'t': t, 'x': [float(v) for v in data['x']]}
