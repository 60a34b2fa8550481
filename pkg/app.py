from dotenv import load_dotenv

from gazeclass.cli import cli

load_dotenv()

# --- ENTRY POINT ---

if __name__ == "__main__":
    cli(prog_name="gazeclass")
