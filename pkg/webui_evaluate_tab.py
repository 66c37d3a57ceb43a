import gradio as gr


def create_evaluate_tab(studio):
    """Create the pulse evaluation tab interface"""
    configs = studio.available_configs()
    with gr.Row():
        config = gr.Dropdown(
            label="Run Configuration",
            choices=configs,
            value=configs[0] if configs else None,
            allow_custom_value=True
        )
        pulse = gr.Textbox(
            label="Pulse File",
            placeholder="path to pulse.json, or 'original'",
            value="original"
        )
    with gr.Row():
        realizations = gr.Number(
            label="Monte-Carlo Realizations",
            value=200,
            minimum=1,
            step=1
        )
        static_mode = gr.Radio(
            label="Static Noise",
            choices=["fixed", "gaussian"],
            value="fixed"
        )
        threads = gr.Number(
            label="Threads",
            value=1,
            minimum=1,
            maximum=64,
            step=1
        )

    evaluate_btn = gr.Button(
        value="Evaluate Pulse",
        variant="primary"
    )

    evaluate_output = gr.Textbox(
        label="Output Status",
        show_copy_button=True,
        lines=12
    )

    evaluate_btn.click(
        fn=lambda cfg, p, k, mode, n: studio.process_evaluate(cfg, p, int(k), mode, int(n)),
        inputs=[config, pulse, realizations, static_mode, threads],
        outputs=evaluate_output,
        show_progress="full"
    )

    gr.Markdown("""
    ### Pulse Evaluation
    Reports the noise-free fidelity, each robustness penalty, leakage and the
    ensemble fidelity under the configured noise strengths.

    **Static noise:** `fixed` applies every static offset at its configured value;
    `gaussian` draws it with that standard deviation per realization.
    """)
