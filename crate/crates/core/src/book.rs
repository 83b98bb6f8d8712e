//! The user guide, republished as API documentation.
//!
//! Each submodule's documentation is one chapter of the guide under
//! `book/` (render it with `mdbook build book`), included verbatim. This
//! keeps the book and the library in lockstep: every Rust code block in the
//! guide compiles and runs as a documentation test of this crate.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(model, "model.md");
chapter!(steady_state, "steady-state.md");
chapter!(closed_forms, "closed-forms.md");
chapter!(collective_modes, "collective-modes.md");
chapter!(simulation, "simulation.md");
chapter!(cli_tool, "cli.md");
