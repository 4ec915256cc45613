pub mod ast;
pub mod label;
pub mod lexer;
pub mod parser;
pub mod pretty;

pub use ast::Ast;
pub use label::{label_sensitivity, LabeledAst, Labels, SensitiveRegion, SensitivityLabel};
pub use parser::{parse, parse_with_defines};
pub use pretty::pretty;
