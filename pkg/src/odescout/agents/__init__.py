from .backends import (
    Backend,
    Completion,
    HttpChatBackend,
    RetryPolicy,
    ScriptedBackend,
    ScriptedSampler,
    ScriptedScientist,
    TokenTally,
    complete,
)
from .parsing import (
    Hypothesis,
    SamplerResponse,
    ScientistResponse,
    TermAssessment,
    default_scientist_response,
    extract_json,
    parse_sampler_response,
    parse_scientist_response,
    render_sampler_response,
    render_scientist_response,
)
from .prompts import PromptBundle, build_sampler_prompt, build_scientist_prompt
