//! Error classes and their exit codes.

use emgspeech::emgio::EmgIoError;
use emgspeech::evalharness::EvalError;
use emgspeech::quantize::QuantError;
use emgspeech::speechnet::ModelError;
use emgspeech::streamrt::StreamError;
use emgspeech::training::TrainError;
use emgspeech::Error;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("UsageError: {0}")]
    Usage(String),
    #[error("DataError: {0}")]
    Data(String),
    #[error("InternalError: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Data(_) => 3,
            Self::Internal(_) => 4,
        }
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::Data(format!("{}: {e}", path.display()))
    }
}

#[derive(Clone, Copy)]
enum Class {
    Usage,
    Data,
    Internal,
}

fn io_class(_: &EmgIoError) -> Class {
    Class::Data
}

fn model_class(e: &ModelError) -> Class {
    match e {
        ModelError::InvalidConfig(_) | ModelError::WindowTooShort { .. } => Class::Usage,
        ModelError::VersionMismatch { .. } | ModelError::Corrupt(_) | ModelError::File { .. } => Class::Data,
        ModelError::Kernel(_) => Class::Internal,
    }
}

fn train_class(e: &TrainError) -> Class {
    match e {
        TrainError::InvalidConfig(_) => Class::Usage,
        TrainError::Model(m) => model_class(m),
        TrainError::EmptyDataset(_)
        | TrainError::ClassUnderflow { .. }
        | TrainError::LabelOutOfRange { .. }
        | TrainError::RaggedWindows { .. } => Class::Data,
    }
}

fn quant_class(e: &QuantError) -> Class {
    match e {
        QuantError::Model(m) => model_class(m),
        QuantError::WindowTooShort { .. } => Class::Usage,
        QuantError::ShapeMismatch(_) => Class::Internal,
        _ => Class::Data,
    }
}

fn classify(e: &Error) -> Class {
    match e {
        Error::Io(e) => io_class(e),
        Error::Dsp(_) => Class::Data,
        Error::Kernel(_) => Class::Internal,
        Error::Model(e) => model_class(e),
        Error::Train(e) => train_class(e),
        Error::Quant(e) => quant_class(e),
        Error::Eval(e) => match e {
            EvalError::InvalidConfig(_) => Class::Usage,
            EvalError::Io(e) => io_class(e),
            EvalError::Train(e) => train_class(e),
            EvalError::Model(e) => model_class(e),
            EvalError::DomainError(_) | EvalError::LengthMismatch { .. } => Class::Internal,
            _ => Class::Data,
        },
        Error::Stream(e) => match e {
            StreamError::InvalidConfig(_) => Class::Usage,
            StreamError::Quant(e) => quant_class(e),
            _ => Class::Data,
        },
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let msg = e.to_string();
        match classify(&e) {
            Class::Usage => Self::Usage(msg),
            Class::Data => Self::Data(msg),
            Class::Internal => Self::Internal(msg),
        }
    }
}

macro_rules! via_crate_error {
    ($($t:ty),*) => {
        $(impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Error::from(e).into()
            }
        })*
    };
}

via_crate_error!(EmgIoError, emgspeech::dsp::DspError, ModelError, TrainError, QuantError, EvalError, StreamError);
