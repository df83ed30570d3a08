"""Prompt templates used by the investigation loop and the specialist agents."""

from __future__ import annotations

ALERT_TEMPLATE = """\
A new alert for a transaction we suspect might be fraudulent has come to our system. This is the transaction number you need to investigate: trans_num (str): '{trans_num}.'

Important:
You must stop after each step of investigation!
"""

NEXT_STEP_MESSAGE = """\
Please continue investigating the transaction we are examining!
Remember to perform just one investigation step at a time.
"""

STEP_FORMAT = """\
Please remember that the format of a step is as follows:

  1. Planning Phase:
    Use your current evidence and domain knowledge to generate new ideas to determine the next steps in assessing whether the transaction is fraudulent or not.

  2. Information-Gathering Phase:
    Implement and execute the code necessary to carry out the steps outlined in the planning phase. This may include creating a plot and retrieving relevant data.

  3. Analysis Phase:
    This phase involves analyzing and interpreting the newly gathered evidence. This evidence is then integrated with information from previous steps to derive meaningful insights about the case. At this point, the LLM may choose to stop if it determines that enough evidence has been collected to make a decision.
"""

GUIDELINES = """\
NOTICE:
  - Remember, a step should be relevant to the transaction we are investigating!
  - If, and only if, you believe there are no new directions to examine that might change your mind about whether the transaction is fraudulent or not, you should end the investigation.
  - Do NOT use more than 1 visualization in a step.
  - You MUST USE your additional tool each time you finish plotting a chart or charts in the information-gathering phase and use this information in the analysis phase.
    **image_to_text function**: This function receives a description (you must include information about the case of investigation).
"""

# Machine-checkable stop condition, appended to the guidelines. The loop
# treats a step as terminal only when its analysis carries this exact line.
CONCLUSION_MARKER = "CONCLUSION: INVESTIGATION COMPLETE"

TERMINATION_INSTRUCTION = f"""\
  - When you end the investigation, your Analysis Phase MUST contain the literal line '{CONCLUSION_MARKER}' on its own line.
"""

VISION_SYSTEM_PROMPT = """\
You are a fraud analyst with over 15 years of experience in fraud investigation, specializing in financial fraud, including credit card fraud. Currently, you are collaborating with an experienced credit card fraud investigator on an ongoing case. Your task is to provide a clear, step-by-step explanation of a complex diagram derived from code-based analysis, focusing on data points, trends, patterns, anomalies, and outliers that may indicate fraudulent activities.

If the chart highlights aspects of the investigation:
Compare the insights from the chart with the case at hand, identifying significant differences and determining if the case belongs to a specific cluster.
"""

REPORT_PROMPT = """\
Generate a report for my investigation, summarizing the steps taken and the newly gathered concrete evidence in each step.

The report should follow this structure:
- **Step [Step Number]:** [Brief description of the step]
  - **Evidence:**
    - [Description of evidence 1]
    - [Description of evidence 2]
    - [Additional evidence as needed]

Example:

Report:
- **Step 1:** Initial analysis of transaction history.
  - **Evidence:**
    - The transaction amount is within the upper typical range for similar merchants.

- **Step 2:** Geographical analysis.
  - **Evidence:**
    - The distance between the cardholder's house location and the transaction's location is ~65 km.

- **step 3:**...
"""

REPORT_RETRY_PROMPT = """\
Your report did not follow the required structure. Regenerate the full report now, using exactly this structure for every step:
- **Step [Step Number]:** [Brief description of the step]
  - **Evidence:**
    - [Description of evidence 1]
"""

STEP_RETRY_PROMPT = """\
Your previous reply did not follow the required investigation step format. Redo the step now, with all three phase headings present in order.

"""

# The key-evidence selection instruction. A verbatim-quote bullet list keeps
# the subset relationship to the source report machine-checkable.
FILTER_TEMPLATE = """\
Below is the unfiltered report of a credit card fraud investigation. Select the evidence that matters most for deciding whether the transaction is fraudulent or legitimate.

Rules:
- Return at most {max_items} evidence entries.
- Quote each selected entry VERBATIM, character for character, as it appears in the report.
- Return only a bullet list, one entry per line, each line starting with '- '.
- Do not add, merge, rephrase, or annotate entries.

Report:

{report}\
"""

DETECTIVE_TEMPLATE = """\
You are a detective closing a credit card fraud case. Based only on the key evidence below, decide whether the transaction is fraudulent.

Your answer MUST start with a single word on the first line: either FRAUDULENT or LEGITIMATE. Then give a one-paragraph rationale.

Key evidence:
{evidence}\
"""

EVALUATION_PROMPT = """\
You are asked to provide a ranking for each category on an Likert scale (strongly disagree, disagree, neither agree nor disagree, agree, strongly agree) regarding the points in the report.

ASPECTS:

- Does this point affect the level of fraud suspicion, either by increasing or decreasing it? Both outcomes should be scored positively, as long as the point alters the suspicion level.
- This point was relevant to the investigation case.
- This point provided me with new knowledge or confirmed unbased knowledge about the case.
- This point logically aligns with the rest of the report.


NOTICE:

- You must give a rating to ALL of the evidence in ALL of the steps in the report.
- Please remember that inaccurately scoring a bad report as a good report may affect the future of your employment, so be critical about your scoring method.
- The report consists of both supporting fraud evidence and supporting legitimate evidence; both types of points should be rated by the same standards.
- The order of the evidence in the report shouldn't matter for your scoring.
- When ranking each aspect, try to isolate it and not take any other aspects into consideration.


Example JSON Rankings
    The unfiltered report:
        - Step 1:
            Evidence:
                - The transaction amount is within the upper typical range for similar merchants.
        - Step 2:
            Evidence:
                - The distance between the cardholder's house and the transaction location is under 100 km.
        - Step 3:
            Evidence:
                - It falls within usual transaction hours, not an outlier.


  ```json
  {{"report_evaluation" : [
    {{
        "evidence": "The transaction amount is within the upper typical range for similar merchants."
        "impact_on_fraud_suspicion_level": "agree,"
        "relevant_to_investigation_case": "strongly agree,"
        "providing_new_knowledge": "disagree,"
        "logical_alignment": "agree"
    }},
    {{
        "evidence": "The distance between the cardholder's house and the transaction location is under 100 km."
        "impact_on_fraud_suspicion_level": "neither agree nor disagree,"
        "relevant_to_investigation_case": "agree,"
        "providing_new_knowledge": "agree,"
        "logical_alignment": "Agree"
    }},
    {{
        "evidence": "It falls within usual transaction hours, not an outlier."
        "impact_on_fraud_suspicion_level": "agree,"
        "relevant_to_investigation_case": "strongly agree,"
        "providing_new_knowledge": "Disagree,"
        "logical_alignment": "Strongly Disagree"
    }},
]}}

  ```
Now, here is the report that I want you to evaluate and provide a rating for:

{report_to_evaluate}
"""

SUPPORTING_STEPS_TEMPLATE = """\
You are auditing a finished credit card fraud investigation. The final verdict was: {verdict}.

For each investigation step below, decide whether it was a supporting decision step (its evidence contributed to the final verdict) or a non-supporting step (a dead end that contributed nothing toward the decision).

Respond with JSON only, mapping every step index to "supporting" or "non-supporting":
{{"labels": {{"1": "supporting", "2": "non-supporting"}}}}

Steps:
{steps}\
"""

CATEGORIZE_TEMPLATE = """\
Assign each investigation step below one category describing what the step did. Use one of: {categories}; coin a short new category only if none fits, and use "other" when nothing meaningful applies.

Respond with JSON only, mapping every step index to its category:
{{"categories": {{"1": "transaction detail extraction"}}}}

Steps:
{steps}\
"""

FEATURE_COMPLETION_TEMPLATE = """\
Below is one credit card transaction record from a tabular dataset. Three fields are hidden and shown as [HIDDEN].

Complete the exact original value of the field '{column}'. Respond with the value only, nothing else.

{record}\
"""

ISFRAUD_TEMPLATE = """\
Below is one credit card transaction record. Decide whether this transaction is fraudulent.

Respond with exactly 'Fraud' or 'Not Fraud'.

{record}\
"""
