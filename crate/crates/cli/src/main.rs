// SPDX-License-Identifier: MIT OR Apache-2.0

fn main() {
    let code = melab_cli::dispatch(
        std::env::args_os(),
        &mut std::io::stdout(),
        &mut std::io::stderr(),
    );
    std::process::exit(code);
}
