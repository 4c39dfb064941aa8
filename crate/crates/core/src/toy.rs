//! A 12-problem demo corpus with a fully scripted mock backend.
//!
//! Each problem's explorer script branches only at the root and continues
//! deterministically below, so the trajectory set is the set of scripted
//! chains regardless of how search allocates rollouts. The corpus exercises
//! every pipeline path: hard and soft negatives, pairing drops (no correct
//! trajectory, no usable negative), critique repair (fences, trailing
//! commas, single-quoted keys, interior quotes, missing braces), an
//! unparseable critique, and a synthesis whose wrong answer the
//! verification filter must drop.

use crate::client::MockScript;
use crate::critique::build_critique_request;
use crate::pairing::{AnchorRule, PairingConfig};
use crate::pipeline::{BackendKind, RunConfig};
use crate::record::{
    BoundaryKind, ContrastPair, Critique, DomainTag, LocalStepCritique, NegativeKind, Problem,
    Step, SynthesizedGuidance, Trajectory,
};
use crate::search::{build_explore_request, Explorer, SearchConfig};
use crate::segment::{segment, SegmentationConfig};
use crate::eval::{build_perturbation_request, build_solve_request};
use crate::synthesis::build_synthesis_request;
use crate::template::TemplateSet;

/// How a problem's scripted critique response is damaged before delivery.
#[derive(Clone, Copy, PartialEq)]
enum CritiqueStyle {
    Clean,
    ProseAndFence,
    TrailingComma,
    SingleQuoteKey,
    InteriorQuote,
    MissingBrace,
    Garbage,
}

struct ToyProblem {
    id: &'static str,
    statement: &'static str,
    gold: &'static str,
    /// Root-branching chains of single-segment step texts; the final step
    /// carries the boxed answer.
    chains: Vec<Vec<String>>,
    critique_style: CritiqueStyle,
    /// Boxed value returned by the scripted synthesis (None = gold).
    synthesis_answer: Option<&'static str>,
    perturbed: &'static str,
    /// Boxed values the eval-stage solver returns for (original, perturbed).
    eval_answers: (&'static str, &'static str),
}

fn chain(steps: &[&str]) -> Vec<String> {
    steps.iter().map(|s| s.to_string()).collect()
}

fn answer_step(value: &str) -> String {
    format!("Final Answer: \\boxed{{{value}}}")
}

fn toy_problems() -> Vec<ToyProblem> {
    vec![
        ToyProblem {
            id: "toy-00",
            statement: "A crate holds 3 red apples and 4 green apples. How many apples are in the crate?",
            gold: "7",
            chains: vec![
                chain(&["We add the two counts: 3 + 4 = 7.\n", &answer_step("7")]),
                chain(&["We multiply the counts: 3 * 4 = 12.\n", &answer_step("12")]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: None,
            perturbed: "Mara's basket has 3 pears and 4 plums. Her cat is 2 years old. How many fruits does the basket hold?",
            eval_answers: ("7", "7"),
        },
        ToyProblem {
            id: "toy-01",
            statement: "A worker packs 5 boxes per hour. How many boxes are packed in 6 hours?",
            gold: "30",
            chains: vec![
                chain(&["Multiply the rate by the time: 5 * 6 = 30.\n", &answer_step("30")]),
                chain(&[
                    "We can add the rate once per hour.\n",
                    "Adding five six times gives 5 + 5 + 5 + 5 + 5 = 25.\n",
                    &answer_step("25"),
                ]),
            ],
            critique_style: CritiqueStyle::ProseAndFence,
            synthesis_answer: None,
            perturbed: "Jonah seals 5 crates each hour of his 6 hour shift. His badge number is 81. How many crates does he seal?",
            eval_answers: ("30", "30"),
        },
        ToyProblem {
            id: "toy-02",
            statement: "What is 20 percent of 50?",
            gold: "10",
            chains: vec![
                chain(&["Convert the percentage: 20 percent is 0.2, and 0.2 * 50 = 10.\n", &answer_step("10")]),
                chain(&["We divide 50 by 20 to get 2.5.\n", &answer_step("2.5")]),
            ],
            critique_style: CritiqueStyle::TrailingComma,
            synthesis_answer: None,
            perturbed: "A shop takes 20 percent of a 50 coin jar as a fee. The jar is 9 inches tall. How many coins is the fee?",
            eval_answers: ("10", "10"),
        },
        ToyProblem {
            id: "toy-03",
            statement: "A rectangle is 8 units long and 3 units wide. What is its area?",
            gold: "24",
            chains: vec![
                chain(&["Area of a rectangle is length times width: 8 * 3 = 24.\n", &answer_step("24")]),
                chain(&["We add the side lengths: 8 + 3 = 11.\n", &answer_step("11")]),
            ],
            critique_style: CritiqueStyle::SingleQuoteKey,
            synthesis_answer: None,
            perturbed: "Priya tiles a floor 8 tiles long and 3 tiles wide, humming 12 songs. How many tiles does she use?",
            eval_answers: ("24", "24"),
        },
        ToyProblem {
            id: "toy-04",
            statement: "Sam reads 12 pages a day. How many pages does Sam read in one week?",
            gold: "84",
            chains: vec![
                chain(&["A week has 7 days, and 12 * 7 = 84.\n", &answer_step("84")]),
                chain(&["A week has 5 weekdays, and 12 * 5 = 60.\n", &answer_step("60")]),
            ],
            critique_style: CritiqueStyle::InteriorQuote,
            synthesis_answer: None,
            perturbed: "Noor studies 12 charts daily for a full week while her phone holds 200 photos. How many charts does she study?",
            eval_answers: ("84", "84"),
        },
        ToyProblem {
            id: "toy-05",
            statement: "A tank holds 90 liters and drains 15 liters per minute. How many minutes until it is empty?",
            gold: "6",
            chains: vec![
                chain(&["Divide volume by rate: 90 / 15 = 6.\n", &answer_step("6")]),
                chain(&["Subtract once: 90 - 15 = 75.\n", &answer_step("75")]),
            ],
            critique_style: CritiqueStyle::Garbage,
            synthesis_answer: None,
            perturbed: "A cistern of 90 buckets loses 15 buckets a minute near a 3 meter wall. In how many minutes is it dry?",
            eval_answers: ("6", "6"),
        },
        ToyProblem {
            id: "toy-06",
            statement: "Three friends split 45 marbles equally. How many marbles does each friend get?",
            gold: "15",
            chains: vec![
                chain(&["Divide the marbles evenly: 45 / 3 = 15.\n", &answer_step("15")]),
                chain(&[
                    "We can deal the marbles out in rounds of three.\n",
                    "Each round places one marble per friend, and there are 45 / 3 = 15 rounds.\n",
                    &answer_step("15"),
                ]),
                chain(&["Each friend takes a third, and a third of 45 is 45 - 3 = 42.\n", &answer_step("42")]),
            ],
            critique_style: CritiqueStyle::MissingBrace,
            synthesis_answer: None,
            perturbed: "Trio of cousins share 45 stamps evenly beside a 7 page album. How many stamps per cousin?",
            eval_answers: ("15", "15"),
        },
        ToyProblem {
            id: "toy-07",
            statement: "A coin is flipped once. What is the probability it lands heads?",
            gold: "1/2",
            chains: vec![
                chain(&["There are two equally likely outcomes, and one is heads.\n", &answer_step("1/2")]),
                chain(&[
                    "List the sample space first.\n",
                    "The outcomes are heads and tails, equally likely.\n",
                    "Exactly one of the two outcomes is heads.\n",
                    &answer_step("0.5"),
                ]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: None,
            perturbed: "Rolling a fair two sided token once, with 14 spectators watching, what is the chance of the marked side?",
            eval_answers: ("0.5", "1/2"),
        },
        ToyProblem {
            id: "toy-08",
            statement: "What is 9 squared?",
            gold: "81",
            chains: vec![
                chain(&["Squaring means doubling: 9 * 2 = 18.\n", &answer_step("18")]),
                chain(&["We take 9 + 9 + 9 = 27 as the square.\n", &answer_step("27")]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: None,
            perturbed: "Compute the square of 9 for a puzzle that has 4 hints.",
            eval_answers: ("81", "81"),
        },
        ToyProblem {
            id: "toy-09",
            statement: "A bus ticket costs 4 dollars. How much do 13 tickets cost in dollars?",
            gold: "52",
            chains: vec![
                chain(&["Multiply price by count: 4 * 13 = 52.\n", &answer_step("52")]),
                chain(&["We add the digits of 13 to the price: 4 + 1 + 3 = 8.\n", &answer_step("8")]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: Some("520"),
            perturbed: "Lena buys 13 ferry passes at 4 coins apiece while 6 gulls watch. What is the total in coins?",
            eval_answers: ("52", "999"),
        },
        ToyProblem {
            id: "toy-10",
            statement: "How many sides does a hexagon have?",
            gold: "6",
            chains: vec![
                chain(&["A hexagon has six sides by definition.\n", &answer_step("6")]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: None,
            perturbed: "Counting the edges of a hexagonal tile that weighs 2 grams, how many edges are there?",
            eval_answers: ("5", "6"),
        },
        ToyProblem {
            id: "toy-11",
            statement: "Solve for k: the expression $k + 3$ equals 5.",
            gold: "2",
            chains: vec![
                chain(&["Subtract 3 from both sides of $k + 3 = 5$ to get $k = 2$.\n", &answer_step("2")]),
                chain(&[
                    "Consider the balance $a\nb$ of both sides before moving terms.\n",
                    "We move 5 to the left to get $k + 3 - 5 = 0$, which is $k - 2 = 0$, giving k as 3.\n",
                    &answer_step("3"),
                ]),
            ],
            critique_style: CritiqueStyle::Clean,
            synthesis_answer: None,
            perturbed: "Find the value j satisfying $j + 3 = 5$ while a timer shows 30 seconds.",
            eval_answers: ("999", "999"),
        },
    ]
}

fn chain_is_correct(steps: &[String], gold: &str) -> bool {
    use crate::answer::{answers_equivalent, canonicalize, extract_final_answer};
    let text: String = steps.iter().map(String::as_str).collect();
    match extract_final_answer(&text) {
        Some(a) => answers_equivalent(&a, &canonicalize(gold)),
        None => false,
    }
}

fn steps_from_chain(steps: &[String]) -> Vec<Step> {
    steps
        .iter()
        .enumerate()
        .map(|(i, t)| Step {
            text: t.clone(),
            index: i,
            boundary_kind: BoundaryKind::Structural,
        })
        .collect()
}

/// A stand-in trajectory carrying the exact step texts search will record.
fn chain_trajectory(problem_id: &str, steps: &[String], reward: u8) -> Trajectory {
    let s = steps_from_chain(steps);
    let length = s.len();
    Trajectory {
        id: format!("toy-{problem_id}-{length}"),
        problem_id: problem_id.into(),
        steps: s,
        reward,
        node_path: (0..=length).collect(),
        accumulated_visits: 1,
        max_node_q: if reward == 1 { 1.0 } else { 0.0 },
        length,
    }
}

fn toy_critique(problem: &ToyProblem, negative: &[String]) -> Critique {
    let neg_head = negative.first().map(String::as_str).unwrap_or("");
    let quirk = if problem.critique_style == CritiqueStyle::InteriorQuote {
        "It relies on the \"shortcut\" move instead of the defined operation."
    } else {
        "It replaces the required operation with a simpler but wrong one."
    };
    Critique {
        divergence_step_index: 0,
        local_step_critique: LocalStepCritique {
            trajectory_a_logic: "Applies the operation the problem statement actually asks for."
                .into(),
            trajectory_b_logic: format!("Starts with: {}", neg_head.trim()),
            critique_of_difference: quirk.into(),
        },
        global_strategic_analysis:
            "Trajectory A maps the quantities to the correct operation before computing; Trajectory B commits early to a misread plan."
                .into(),
        synthesized_guidance: SynthesizedGuidance {
            success_pattern: "Name the quantities and pick the operation that matches the question before computing.".into(),
            failure_mode_to_avoid: "Substituting a familiar but mismatched operation for the one the problem defines.".into(),
        },
    }
}

fn dirty_critique_json(critique: &Critique, style: CritiqueStyle) -> String {
    let clean = serde_json::to_string_pretty(critique).expect("critique serializes");
    match style {
        CritiqueStyle::Clean => clean,
        CritiqueStyle::ProseAndFence => format!(
            "Sure, here is the contrastive analysis you asked for.\n```json\n{clean}\n```\nI hope the breakdown helps."
        ),
        CritiqueStyle::TrailingComma => {
            let idx = clean.rfind('}').expect("object close");
            format!("{},{}", &clean[..idx], &clean[idx..])
        }
        CritiqueStyle::SingleQuoteKey => {
            clean.replacen("\"divergence_step_index\"", "'divergence_step_index'", 1)
        }
        CritiqueStyle::InteriorQuote => clean.replace("\\\"shortcut\\\"", "\"shortcut\""),
        CritiqueStyle::MissingBrace => clean[..clean.len() - 1].to_string(),
        CritiqueStyle::Garbage => {
            "I could not compare these trajectories meaningfully, sorry.".into()
        }
    }
}

fn synthesis_text(problem: &ToyProblem) -> String {
    let value = problem.synthesis_answer.unwrap_or(problem.gold);
    format!(
        "Step 1: Identify the quantities named by the problem and the operation that relates them.\nStep 2: A common mistake is substituting a familiar but mismatched operation; we apply the stated one directly and simplify.\nFinal Answer: \\boxed{{{value}}}"
    )
}

fn solve_text(boxed: &str) -> String {
    format!("Step 1: Work through the relation directly.\nFinal Answer: \\boxed{{{boxed}}}")
}

/// The demo configuration matching the scripted corpus.
pub fn toy_config() -> RunConfig {
    RunConfig {
        seed: 7,
        workers: 1,
        backend: BackendKind::Mock,
        mock_script: None,
        target_size: 18,
        search: SearchConfig {
            rollouts: 8,
            ..SearchConfig::default()
        },
        pairing: PairingConfig {
            pairs_per_problem: 3,
            hard_fraction: None,
            rng_seed: 0,
            anchor_rule: AnchorRule::ShortestThenMaxQ,
        },
        ..RunConfig::default()
    }
}

/// Build the demo problems and the mock script that answers every request
/// the pipeline will issue for them.
pub fn toy_corpus() -> (Vec<Problem>, MockScript) {
    let cfg = toy_config();
    let templates = TemplateSet::builtin();
    let seg_cfg = SegmentationConfig::default();
    let mut script = MockScript::new(11);

    let placeholder_client = crate::client::ModelClient::mock(MockScript::new(0));
    let explorer = Explorer {
        client: &placeholder_client,
        model: cfg.explorer.model.clone(),
        max_output_tokens: cfg.max_output_tokens,
        templates: &templates,
    };

    let mut problems = Vec::new();
    for case in toy_problems() {
        let problem = Problem {
            id: case.id.into(),
            statement: case.statement.into(),
            gold_answer: case.gold.into(),
            domain_tag: DomainTag::Math,
        };

        // Explorer script: root lists each chain head once; deeper prefixes
        // force a single continuation.
        let heads: Vec<&str> = case.chains.iter().map(|c| c[0].as_str()).collect();
        let root_req =
            build_explore_request(&problem, &[], &explorer, cfg.search.expansion_temperature)
                .expect("explore template renders");
        script.script(&root_req, heads, format!("{} root", case.id));
        for c in &case.chains {
            for step_text in c {
                debug_assert_eq!(
                    segment(step_text, &seg_cfg).steps.len(),
                    1,
                    "toy chain steps must be single segments: {step_text:?}"
                );
            }
            for j in 1..c.len() {
                let prefix = steps_from_chain(&c[..j]);
                let req = build_explore_request(
                    &problem,
                    &prefix,
                    &explorer,
                    cfg.search.expansion_temperature,
                )
                .expect("explore template renders");
                script.script(&req, vec![c[j].as_str()], format!("{} depth {j}", case.id));
            }
        }

        // Critique + synthesis script over every possible (anchor, negative).
        let correct: Vec<&Vec<String>> = case
            .chains
            .iter()
            .filter(|c| chain_is_correct(c, case.gold))
            .collect();
        if let Some(anchor_chain) = correct.iter().min_by_key(|c| c.len()) {
            let anchor = chain_trajectory(case.id, anchor_chain, 1);
            let mut negatives: Vec<(&Vec<String>, NegativeKind)> = Vec::new();
            for c in &case.chains {
                if !chain_is_correct(c, case.gold) {
                    negatives.push((c, NegativeKind::Hard));
                } else if c.len() > anchor_chain.len() {
                    negatives.push((c, NegativeKind::Soft));
                }
            }
            for (neg_chain, kind) in negatives {
                let reward = u8::from(kind == NegativeKind::Soft);
                let pair = ContrastPair {
                    id: "toy-pair".into(),
                    problem_id: case.id.into(),
                    positive: anchor.clone(),
                    negative: chain_trajectory(case.id, neg_chain, reward),
                    negative_kind: kind,
                };
                let critique = toy_critique(&case, neg_chain);
                let critique_req = build_critique_request(
                    &problem,
                    &pair,
                    &templates,
                    &cfg.analyst.model,
                    cfg.critique_temperature,
                    cfg.max_output_tokens,
                )
                .expect("critique template renders");
                let raw = dirty_critique_json(&critique, case.critique_style);
                script.script(
                    &critique_req,
                    vec![raw.as_str()],
                    format!("{} critique", case.id),
                );
                if case.critique_style != CritiqueStyle::Garbage {
                    let (synth_req, _) = build_synthesis_request(
                        &problem,
                        &critique,
                        &anchor.text(),
                        &templates,
                        &cfg.analyst.model,
                        cfg.synthesis_temperature,
                        cfg.max_output_tokens,
                    )
                    .expect("synthesis template renders");
                    let text = synthesis_text(&case);
                    script.script(
                        &synth_req,
                        vec![text.as_str()],
                        format!("{} synthesis", case.id),
                    );
                }
            }
        }

        // Eval script: perturbation plus greedy solves for both variants.
        let eval_model = cfg.eval_model_name();
        let perturb_req =
            build_perturbation_request(&problem, &templates, eval_model, cfg.max_output_tokens)
                .expect("perturb template renders");
        script.script(
            &perturb_req,
            vec![case.perturbed],
            format!("{} perturb", case.id),
        );
        let solve_orig =
            build_solve_request(case.statement, &templates, eval_model, cfg.max_output_tokens)
                .expect("solve template renders");
        let orig_text = solve_text(case.eval_answers.0);
        script.script(
            &solve_orig,
            vec![orig_text.as_str()],
            format!("{} solve original", case.id),
        );
        let solve_pert = build_solve_request(
            case.perturbed.trim(),
            &templates,
            eval_model,
            cfg.max_output_tokens,
        )
        .expect("solve template renders");
        let pert_text = solve_text(case.eval_answers.1);
        script.script(
            &solve_pert,
            vec![pert_text.as_str()],
            format!("{} solve perturbed", case.id),
        );

        problems.push(problem);
    }
    (problems, script)
}
