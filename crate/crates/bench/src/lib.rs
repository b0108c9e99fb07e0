pub(crate) const _PLACEHOLDER: () = ();
