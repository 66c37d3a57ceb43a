import gradio as gr
from webui_studio import VanLoanStudio
from webui_optimize_tab import create_optimize_tab
from webui_evaluate_tab import create_evaluate_tab
from webui_spectrum_tab import create_spectrum_tab


def create_ui():
    """Create and configure the main UI interface"""
    studio = VanLoanStudio()

    with gr.Blocks(title="Van Loan GRAPE Studio") as app:
        gr.Markdown("# Van Loan GRAPE Studio")
        gr.Markdown(f"Configs found: {', '.join(studio.available_configs()) or 'none'}")

        with gr.Tabs():
            with gr.Tab("Optimize"):
                create_optimize_tab(studio)

            with gr.Tab("Evaluate"):
                create_evaluate_tab(studio)

            with gr.Tab("Spectrum"):
                create_spectrum_tab(studio)

        return app


if __name__ == "__main__":
    print("Loading Van Loan GRAPE Studio modules...")
    app = create_ui()
    app.launch(
        server_name="127.0.0.1",  # Local only
        server_port=7860,
        share=False
    )
