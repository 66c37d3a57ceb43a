import gradio as gr


def create_optimize_tab(studio):
    """Create the pulse optimization tab interface"""
    configs = studio.available_configs()
    with gr.Row():
        config = gr.Dropdown(
            label="Run Configuration",
            choices=configs,
            value=configs[0] if configs else None,
            allow_custom_value=True
        )
        seed = gr.Number(
            label="Seed (blank keeps the configured seed)",
            value=None,
            precision=0
        )
        threads = gr.Number(
            label="Threads",
            value=1,
            minimum=1,
            maximum=64,
            step=1
        )

    optimize_btn = gr.Button(
        value="Optimize Pulse",
        variant="primary"
    )

    optimize_output = gr.Textbox(
        label="Output Status",
        show_copy_button=True,
        lines=15
    )

    optimize_btn.click(
        fn=lambda cfg, s, n: studio.process_optimize(cfg, None if s is None else int(s), int(n)),
        inputs=[config, seed, threads],
        outputs=optimize_output,
        show_progress="full"
    )

    gr.Markdown("""
    ### Robust Pulse Optimization
    Runs projected L-BFGS ascent on the robust fitness: gate fidelity minus the
    weighted squared norms of the selected noise derivatives. Weights are relaxed
    round by round while the fidelity stays under the threshold.

    **Outputs:**
    - `pulse.json` with raw parameters, smoothing width and amplitudes
    - `trace.json` with per-iteration fidelity, penalties and stop reasons
    """)
