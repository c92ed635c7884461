//! Sampling and refinement prompts.
//!
//! The instruction blocks are reproduced byte for byte, typos included;
//! fine-tuned models are trained on exactly this text.

use super::{ChatMessage, Role};
use crate::arc::{render_grid, CandidateEvaluation, Grid, Outcome, Program, Task};

pub const SYSTEM_PROMPT: &str = "You are an AI assistant specialized in solving Abstract Reasoning Corpus (ARC-AGI) tasks by reasoning and generating Python code.";

const COLOR_LEGEND: &str = "The number in the input grid can be mapped to the following colors: 0:Black; 1:Blue; 2:Red; 3:Green; 4:Yellow; 5:Grey; 6:Pink; 7:Orange; 8:Purple; 9:Brown";

const SAMPLING_INSTRUCTIONS: &str = "You are an AI assistant specialized in solving Abstract Reasoning Corpus (ARC-AGI) tasks by generating Python code.
Your goal is to analyze input-output grid pairs. The outputs were produced by applying a transformation rule to the inputs. Implement the transformation rules as a Python function.
You should only write the implemented the transformation in code.

You must write code in triple backticks (```python and then ```). You must write a function called `transform` which takes a single argument, the input grid as `list[list[int]]`, and returns the transformed grid (also as `list[list[int]]`).
You should make sure that you implement a version of the transformation which works in general (at least for all given input-output pairs and test input pairs).";

const REFINEMENT_INSTRUCTIONS: &str = "You are an AI assistant specialized in solving Abstract Reasoning Corpus (ARC-AGI) tasks by repairing Python code implementations.
Your goal is to analyze input-output grid pairs. The outputs were produced by applying a transformation rule to the inputs.
You will be given a python function `transform` that was supposed to implement the transformation rule, but it is not working correctly for all inputs.
You role is to fix this `transform` function.

Your solution should be:
- Accurate: Correctly fix the transformation for all given inputs so they give correct outputs as provided (it should also work for all test inputs)
- Comprehensive: Handles all possible input scenarios
- Well-structured: Uses clear, readable, and efficient code";

fn shape(g: &Grid) -> String {
    format!("grid shape: {} by {}", g.height(), g.width())
}

/// The "## Input k / ## Output k / ## Test Input k" block for a task.
pub fn render_task_block(task: &Task) -> String {
    let mut sections = Vec::new();
    for (i, pair) in task.train().iter().enumerate() {
        let k = i + 1;
        sections.push(format!(
            "## Input {k} ({}):\n{}",
            shape(&pair.input),
            render_grid(&pair.input)
        ));
        sections.push(format!(
            "## Output {k} ({}):\n{}",
            shape(&pair.output),
            render_grid(&pair.output)
        ));
    }
    for (i, g) in task.test_inputs().iter().enumerate() {
        sections.push(format!("## Test Input {} ({}):\n{}", i + 1, shape(g), render_grid(g)));
    }
    sections.join("\n\n")
}

pub fn fence_python(source: &str) -> String {
    format!("```python\n{source}\n```")
}

fn few_shot_block(task: &Task, solution: &Program) -> String {
    format!(
        "Here is an example of an ARC-AGI task and its solution:\n\n# Example task:\n{}\n\n# Solution:\n{}\n",
        render_task_block(task),
        fence_python(&solution.source)
    )
}

/// System and user messages asking for a fresh `transform` program.
pub fn build_sampling_prompt(task: &Task, few_shot: Option<(&Task, &Program)>) -> Vec<ChatMessage> {
    let example = few_shot.map(|(t, p)| few_shot_block(t, p)).unwrap_or_default();
    let user = format!(
        "{SAMPLING_INSTRUCTIONS}\n{COLOR_LEGEND}\n\n{example}\nNow, solve the following ARC-AGI task:\n\n# Task to solve:\n{}",
        render_task_block(task)
    );
    vec![
        ChatMessage::new(Role::System, SYSTEM_PROMPT),
        ChatMessage::new(Role::User, user),
    ]
}

fn describe_failure(outcome: &Outcome) -> String {
    match outcome {
        Outcome::Ok { grid } => format!(
            "The execution gave the following results ({}):\n{}",
            shape(grid),
            render_grid(grid)
        ),
        Outcome::RuntimeError { message } => {
            format!("The execution gave the following error:\n{message}")
        }
        Outcome::Timeout => "The execution gave the following error:\nTimeout".to_string(),
        Outcome::InvalidOutput { message } => {
            format!("The execution gave the following error:\nInvalid output grid: {message}")
        }
    }
}

/// System and user messages asking to repair `program` given its per-pair
/// execution feedback on `task`.
pub fn build_refinement_prompt(task: &Task, program: &Program, eval: &CandidateEvaluation) -> Vec<ChatMessage> {
    let n = task.train().len();
    let mut blocks = Vec::new();
    let mut failed = Vec::new();
    for (i, (pair, outcome)) in task.train().iter().zip(&eval.train_outcomes).enumerate() {
        let k = i + 1;
        if outcome.ok_grid() == Some(&pair.output) {
            blocks.push(format!("## Output {k} computed by `transform` is correct."));
        } else {
            failed.push(format!("Output {k}"));
            blocks.push(format!(
                "## Output {k} computed by `transform` is incorrect.\n{}",
                describe_failure(outcome)
            ));
        }
    }
    for (i, outcome) in eval.test_outcomes.iter().enumerate() {
        blocks.push(format!(
            "## Output Test {} computed by `transform` (we don't know if it is correct or not) {}",
            i + 1,
            describe_failure(outcome)
        ));
    }
    let closing = if failed.is_empty() {
        "The previous code gives correct output for all train inputs. Now, you need to make sure the code also produces correct output for the test inputs.".to_string()
    } else {
        format!(
            "The previous code give incorrect output for: {}. Now, you need to fix the code to produce correct output for all inputs.",
            failed.join(", ")
        )
    };
    let user = format!(
        "{REFINEMENT_INSTRUCTIONS}\n\n{COLOR_LEGEND}\n\n**Now, repair the following ARC-AGI task implementation:**\n\n# Task to solve:\n{}\n\nPrevious implementation:\n{}\nThis implementation of transform function correctly worked on {}/{n} train input-output pairs.\nDetailed results:\n{}\n\n{closing}",
        render_task_block(task),
        fence_python(&program.source),
        n - failed.len(),
        blocks.join("\n"),
    );
    vec![
        ChatMessage::new(Role::System, SYSTEM_PROMPT),
        ChatMessage::new(Role::User, user),
    ]
}

/// Human-readable transcript with one header line per message.
pub fn render_transcript(messages: &[ChatMessage]) -> String {
    let mut out = String::new();
    for m in messages {
        out.push_str(&format!("-----  Role: {}  --------------------\n", m.role.as_str()));
        out.push_str(&m.content);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arc::{parse_task, Origin, Pair, ProgramId, Provenance};

    fn task() -> Task {
        parse_task(
            "t",
            r#"{"train":[{"input":[[1,2]],"output":[[2,1]]},{"input":[[3]],"output":[[3]]}],
                "test":[{"input":[[4,5]]}]}"#,
        )
        .unwrap()
    }

    fn program(src: &str) -> Program {
        Program {
            id: ProgramId(1),
            source: src.into(),
            provenance: Provenance::Sampled,
            origin: Origin::default(),
        }
    }

    #[test]
    fn sampling_prompt_without_example_has_no_example_block() {
        let msgs = build_sampling_prompt(&task(), None);
        assert_eq!(msgs.len(), 2);
        assert!(!msgs[1].content.contains("# Example task:"));
        assert!(msgs[1]
            .content
            .contains("## Test Input 1 (grid shape: 1 by 2):\n[[4 5]]"));
        assert!(msgs[1].content.contains("9:Brown\n\n\nNow, solve"));
    }

    #[test]
    fn sampling_prompt_with_example() {
        let ex = task();
        let sol = program("def transform(grid):\n    return [r[::-1] for r in grid]");
        let msgs = build_sampling_prompt(&task(), Some((&ex, &sol)));
        let user = &msgs[1].content;
        assert!(user.contains("# Example task:\n## Input 1 (grid shape: 1 by 2):"));
        assert!(user.contains("```python\ndef transform(grid):\n    return [r[::-1] for r in grid]\n```\n\nNow, solve"));
    }

    #[test]
    fn refinement_prompt_marks_correct_and_failed_pairs() {
        let t = task();
        let eval = CandidateEvaluation::new(
            ProgramId(1),
            &t,
            vec![
                Outcome::Ok {
                    grid: Grid::new(vec![vec![1, 2]]).unwrap(),
                },
                Outcome::Ok {
                    grid: Grid::new(vec![vec![3]]).unwrap(),
                },
            ],
            vec![Outcome::RuntimeError {
                message: "IndexError: boom".into(),
            }],
        )
        .unwrap();
        let msgs = build_refinement_prompt(&t, &program("def transform(grid):\n    return grid"), &eval);
        let user = &msgs[1].content;
        assert!(user.contains("correctly worked on 1/2 train input-output pairs."));
        assert!(user.contains("## Output 2 computed by `transform` is correct."));
        assert!(user.contains("## Output 1 computed by `transform` is incorrect.\nThe execution gave the following results (grid shape: 1 by 2):\n[[1 2]]"));
        assert!(user.contains(
            "(we don't know if it is correct or not) The execution gave the following error:\nIndexError: boom"
        ));
        assert!(user.ends_with(
            "incorrect output for: Output 1. Now, you need to fix the code to produce correct output for all inputs."
        ));
    }

    #[test]
    fn fully_correct_parent_has_no_incorrect_blocks() {
        let t = task();
        let eval = CandidateEvaluation::new(
            ProgramId(1),
            &t,
            t.train()
                .iter()
                .map(|p: &Pair| Outcome::Ok { grid: p.output.clone() })
                .collect(),
            vec![Outcome::Timeout],
        )
        .unwrap();
        let msgs = build_refinement_prompt(&t, &program("x"), &eval);
        assert!(!msgs[1].content.contains("is incorrect."));
        assert!(msgs[1].content.contains("correctly worked on 2/2"));
    }

    #[test]
    fn builders_are_pure() {
        let t = task();
        assert_eq!(build_sampling_prompt(&t, None), build_sampling_prompt(&t, None));
    }
}
